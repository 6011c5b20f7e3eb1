use tether_core::encoder::{EncoderArch, EncoderSnapshot};
use tether_core::eval::{evaluate, Protocol, SplitTag};
use tether_core::synthdata::{generate_classification, SyntheticSpec};
use tether_core::trainer::*;

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] }

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let ft_lr: f64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let ft_tau: f64 = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let steps: usize = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(300);
    let view_noise: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let pre_steps: usize = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(400);
    let hidden: usize = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(32);
    let depth: usize = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(1);
    let in_dim: usize = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(12);
    let domains: usize = a.get(9).map(|s| s.parse().unwrap()).unwrap_or(3);
    let pre_lr: f64 = a.get(10).map(|s| s.parse().unwrap()).unwrap_or(5e-3);
    println!("ft_lr={ft_lr} ft_tau={ft_tau} steps={steps} vnoise={view_noise} pre={pre_steps} hidden={hidden}x{depth} d={in_dim} domains={domains} pre_lr={pre_lr}");
    let arch = EncoderArch { input_dim: in_dim, hidden_dims: vec![hidden; depth], embed_dim: 16, activation: tether_core::encoder::Activation::Tanh };
    let alphas = [0.0, 0.1, 1.0, 10.0, 100.0];
    let mut id_acc = vec![vec![]; alphas.len()];
    let mut ood_acc = vec![vec![]; alphas.len()];
    let mut ood_cvar = vec![vec![]; alphas.len()];
    let mut drifts = vec![vec![]; alphas.len()];
    for seed in [101u64, 202, 303, 404, 505] {
        let spec = SyntheticSpec {
            num_classes: 10, held_out_classes: vec![8, 9], num_domains: domains, input_dim: in_dim,
            samples_per_class_per_domain: 20, noise_sigma: 0.1, domain_shift_strength: 0.5, seed,
        };
        let splits = generate_classification(&spec).unwrap();
        let pcfg = PretrainConfig { steps: pre_steps, batch_size: 64, lr0: pre_lr, view_noise, seed: seed ^ 0xbeef, ..PretrainConfig::default() };
        let (theta0, prec) = run_pretraining(&arch, &splits, &pcfg).unwrap();
        assert!(!prec.diverged);
        let snap = EncoderSnapshot::of(&theta0);
        let class_names = splits.class_names();
        for (i, &alpha) in alphas.iter().enumerate() {
            let cfg = TrainConfig { alpha, tau: ft_tau, lr0: ft_lr, steps, batch_size: 32, seed: seed ^ 0xf00d, ..TrainConfig::classification_defaults() };
            let out = run_training(&theta0, &splits, &cfg).unwrap();
            assert!(!out.record.diverged, "alpha {alpha} diverged");
            let table = out.model.head.caption_table().unwrap();
            let proto = Protocol::Classification { table, class_names: &class_names };
            let id = evaluate(&out.model.encoder, &snap, &splits.test_id, &proto, SplitTag::Id).unwrap();
            let ood = evaluate(&out.model.encoder, &snap, &splits.test_ood, &proto, SplitTag::Ood).unwrap();
            id_acc[i].push(id.get("accuracy").unwrap());
            ood_acc[i].push(ood.get("accuracy").unwrap());
            ood_cvar[i].push(ood.get("cluster_variance").unwrap());
            drifts[i].push(id.get("mean_drift").unwrap());
        }
    }
    for (i, &alpha) in alphas.iter().enumerate() {
        println!("alpha={alpha:>6}: med_id_acc={:.3} med_ood_acc={:.3} med_ood_cvar={:.4e} med_drift={:.3e}",
            median(id_acc[i].clone()), median(ood_acc[i].clone()), median(ood_cvar[i].clone()), median(drifts[i].clone()));
    }
}
