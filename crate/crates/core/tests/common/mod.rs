#![allow(dead_code)]

use fedet::enhancer::{ClassId, EnhancerGroup, EnhancerParams};
use fedet::memory::LabeledSample;
use fedet::{build_backbone, Activation, BackboneConfig, FrozenBackbone, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        width: 8,
        heads: 2,
        ff_width: 16,
        max_seq_len: 8,
        feature_dim: 4,
        seed: 3,
    }
}

pub fn tiny_backbone() -> FrozenBackbone {
    build_backbone(tiny_config()).unwrap()
}

pub fn desk_backbone() -> FrozenBackbone {
    build_backbone(BackboneConfig::default()).unwrap()
}

/// Random enhancers and head; not the identity.
pub fn random_group(id: u32, domain: &[ClassId], backbone: &FrozenBackbone, bottleneck: usize, seed: u64) -> EnhancerGroup {
    let d = backbone.width();
    let enhancers = (0..backbone.depth())
        .map(|i| EnhancerParams::random(d, bottleneck, Activation::Gelu, seed * 31 + i as u64, 0.3))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let head = Tensor::matrix(d, domain.len(), (0..d * domain.len()).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    EnhancerGroup::new(id, 0, enhancers, head, domain.to_vec()).unwrap()
}

/// Class `c` sits at a seeded center with separation `sep`; `n` samples per class.
pub fn clusters(classes: &[ClassId], n: usize, backbone: &FrozenBackbone, sep: f64, seed: u64) -> Vec<LabeledSample> {
    let f = backbone.config().feature_dim;
    let seq = 3;
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut out = Vec::new();
    for &c in classes {
        let mut crng = ChaCha8Rng::seed_from_u64(1000 + u64::from(c));
        let center: Vec<f64> = (0..f).map(|_| crng.random_range(-sep..sep)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(c) << 8));
        for _ in 0..n {
            let data = (0..seq * f).map(|i| center[i % f] + noise.sample(&mut rng)).collect();
            out.push(LabeledSample::new(Tensor::matrix(seq, f, data).unwrap(), c));
        }
    }
    out
}
