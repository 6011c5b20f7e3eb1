use tether_core::encoder::EncoderArch;
use tether_core::synthdata::{generate_classification, SyntheticSpec};
use tether_core::trainer::{run_pretraining, PretrainConfig};

fn main() {
    let spec = SyntheticSpec {
        num_classes: 5, held_out_classes: vec![4], num_domains: 2, input_dim: 6,
        samples_per_class_per_domain: 6, noise_sigma: 0.1, domain_shift_strength: 0.4, seed: 7,
    };
    let splits = generate_classification(&spec).unwrap();
    let arch = EncoderArch { input_dim: 6, hidden_dims: vec![8], embed_dim: 5, activation: tether_core::encoder::Activation::Tanh };
    for (steps, lr) in [(60usize, 1e-3), (300, 1e-3), (300, 5e-3), (300, 1e-2), (600, 5e-3)] {
        let cfg = PretrainConfig { steps, batch_size: 16, lr0: lr, seed: 21, ..PretrainConfig::default() };
        let (_, rec) = run_pretraining(&arch, &splits, &cfg).unwrap();
        let n = rec.steps.len();
        let head: f64 = rec.steps[..10].iter().map(|s| s.contrastive_loss).sum::<f64>() / 10.0;
        let tail: f64 = rec.steps[n-10..].iter().map(|s| s.contrastive_loss).sum::<f64>() / 10.0;
        println!("steps={steps:4} lr={lr:.0e}  first10={head:.4}  last10={tail:.4}");
    }
}
