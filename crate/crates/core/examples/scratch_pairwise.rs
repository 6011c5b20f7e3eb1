use tether_core::encoder::{EncoderArch, EncoderSnapshot};
use tether_core::eval::{evaluate, Protocol, SplitTag};
use tether_core::synthdata::{generate_identities, SyntheticSpec};
use tether_core::trainer::*;

fn median(mut v: Vec<f64>) -> f64 { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] }

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let ft_lr: f64 = a.get(1).map(|s| s.parse().unwrap()).unwrap_or(5e-3);
    let steps: usize = a.get(2).map(|s| s.parse().unwrap()).unwrap_or(400);
    let lambda: f64 = a.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.9);
    let arc_scale: f64 = a.get(4).map(|s| s.parse().unwrap()).unwrap_or(64.0);
    let pre_steps: usize = a.get(5).map(|s| s.parse().unwrap()).unwrap_or(300);
    let in_dim: usize = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(8);
    let sigma: f64 = a.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let vnoise: f64 = a.get(8).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let pre_lr: f64 = a.get(9).map(|s| s.parse().unwrap()).unwrap_or(5e-3);
    println!("ft_lr={ft_lr} steps={steps} lambda={lambda} arc_scale={arc_scale} pre={pre_steps} d={in_dim} sigma={sigma} vnoise={vnoise} pre_lr={pre_lr}");
    let arch = EncoderArch { input_dim: in_dim, hidden_dims: vec![32], embed_dim: 16, activation: tether_core::encoder::Activation::Tanh };
    for variant in [LossVariant::ClipContrastive, LossVariant::ArcMargin] {
        let mut tar0 = vec![]; let mut tar1 = vec![]; let mut id0 = vec![]; let mut id1 = vec![];
        for seed in [11u64, 22, 33, 44, 55] {
            let spec = SyntheticSpec {
                num_classes: 200, held_out_classes: (150..200).collect(), num_domains: 2, input_dim: in_dim,
                samples_per_class_per_domain: 4, noise_sigma: sigma, domain_shift_strength: lambda, seed,
            };
            let splits = generate_identities(&spec).unwrap();
            let pcfg = PretrainConfig { steps: pre_steps, batch_size: 64, lr0: pre_lr, view_noise: vnoise, seed: seed ^ 0xbeef, ..PretrainConfig::default() };
            let (theta0, prec) = run_pretraining(&arch, &splits, &pcfg).unwrap();
            assert!(!prec.diverged);
            let snap = EncoderSnapshot::of(&theta0);
            if matches!(variant, LossVariant::ClipContrastive) {
                let o0 = evaluate(&theta0, &snap, &splits.test_ood, &Protocol::Verification, SplitTag::Ood).unwrap();
                eprintln!("  seed {seed}: theta0 ood_tar={:.3}", o0.get("tar@far=1e-1").unwrap());
            }
            for (alpha, tars, ids) in [(0.0, &mut tar0, &mut id0), (1.0, &mut tar1, &mut id1)] {
                let cfg = TrainConfig { alpha, lr0: ft_lr, steps, batch_size: 32, seed: seed ^ 0xf00d,
                    loss_variant: variant, arc_scale, ..TrainConfig::pairwise_defaults() };
                let out = run_training(&theta0, &splits, &cfg).unwrap();
                assert!(!out.record.diverged, "{variant:?} alpha {alpha} diverged");
                let ood = evaluate(&out.model.encoder, &snap, &splits.test_ood, &Protocol::Verification, SplitTag::Ood).unwrap();
                let id = evaluate(&out.model.encoder, &snap, &splits.test_id, &Protocol::Verification, SplitTag::Id).unwrap();
                tars.push(ood.get("tar@far=1e-1").unwrap());
                ids.push(id.get("tar@far=1e-1").unwrap());
            }
        }
        println!("{variant:?}: med OOD tar@0.1 alpha0={:.3} alpha1={:.3} | med ID tar@0.1 alpha0={:.3} alpha1={:.3}",
            median(tar0), median(tar1), median(id0), median(id1));
    }
}
