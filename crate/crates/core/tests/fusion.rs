use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use segfuse_core::fusion::{fuse_average, fuse_deep, stack_inputs, stack_maps};
use segfuse_core::jaccard::{jaccard_image, SegMap};
use segfuse_core::segnet::{build_pointwise, build_unet, init_weights, UNetConfig};
use segfuse_core::tilestore::{generate_dataset, SceneSpec, Tile};
use segfuse_core::trainer::{train, Sample, TrainConfig};

fn tiles(seed: u64, n: usize) -> Vec<Tile> {
    let spec = SceneSpec { width: 32, height: 32, n_buildings: 3, seed, ..SceneSpec::default() };
    generate_dataset(&spec, n).unwrap()
}

fn noisy_truth(tile: &Tile, sd: f32, rng: &mut ChaCha8Rng) -> SegMap {
    let normal = Normal::new(0.0f32, sd).unwrap();
    SegMap::new(tile.target().mapv(|t| (t + normal.sample(rng)).clamp(0.0, 1.0))).unwrap()
}

fn uniform_noise(tile: &Tile, rng: &mut ChaCha8Rng) -> SegMap {
    SegMap::new(Array2::from_shape_simple_fn(tile.mask.dim(), || rng.random::<f32>())).unwrap()
}

#[test]
fn linear_combiner_discounts_a_noise_member() {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = tiles(100 + seed, 16)
            .iter()
            .map(|t| {
                let maps = [noisy_truth(t, 0.3, &mut rng), uniform_noise(t, &mut rng), noisy_truth(t, 0.3, &mut rng)];
                Sample { input: stack_maps(&maps).unwrap(), target: t.target() }
            })
            .collect();
        let mut model = init_weights(build_pointwise(3, true).unwrap(), seed);
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e-2, augment: false, seed, ..TrainConfig::default() };
        train(&mut model, &samples[..12], &samples[12..], &cfg, None).unwrap();
        let w = model.tensor("head.weight").unwrap();
        lines.push(format!("seed {seed}: w = {w:?}"));
        if w[1].abs() < w[0].abs().min(w[2].abs()) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "noise weight smallest in {wins}/5 seeds: {lines:#?}");
}

#[test]
fn deep_combiner_overrides_an_overconfident_member() {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = tiles(200 + seed, 16);
        let maps: Vec<[SegMap; 3]> = data
            .iter()
            .map(|t| {
                let adversary = SegMap::new(t.target().mapv(|v| 1.0 - v)).unwrap();
                [noisy_truth(t, 0.25, &mut rng), noisy_truth(t, 0.25, &mut rng), adversary]
            })
            .collect();
        let samples: Vec<Sample> = maps
            .iter()
            .zip(&data)
            .map(|(m, t)| Sample { input: stack_inputs(m, t.channels.view()).unwrap(), target: t.target() })
            .collect();
        let cfg = UNetConfig { depth: 2, base_width: 4, conv_per_block: 1, ..UNetConfig::reference(11) };
        let mut model = init_weights(build_unet(&cfg).unwrap(), seed);
        let tc = TrainConfig { epochs: 4, learning_rate: 1e-2, seed, ..TrainConfig::default() };
        train(&mut model, &samples[..12], &samples[12..], &tc, None).unwrap();

        let (mut avg, mut deep) = (0.0, 0.0);
        for (m, t) in maps.iter().zip(&data).skip(12) {
            let truth = SegMap::from_mask(&t.mask);
            avg += jaccard_image(&truth, &fuse_average(m).unwrap()).unwrap() / 4.0;
            deep += jaccard_image(&truth, &fuse_deep(m, t.channels.view(), &model).unwrap()).unwrap() / 4.0;
        }
        lines.push(format!("seed {seed}: average {avg:.4}, deep {deep:.4}"));
        if deep > avg {
            wins += 1;
        }
    }
    assert!(wins >= 4, "deep beat average in {wins}/5 seeds: {lines:#?}");
}
