//! Property-based invariants for mask construction, scheme
//! serialization, and the locality metric, plus CSV reporting checks
//! against a real training run.

use mait::harness::dataset::gen_local_task;
use mait::harness::metrics_csv;
use mait::maskgen::{
    build_mask, make_scheme, HeadMask, MaskKind, MaskScheme, PatchGrid, SchemePreset,
};
use mait::metrics::als;
use mait::model::{init_params, ModelConfig};
use mait::numerics::Tensor;
use mait::train::{als_table, train_loop, TrainOptions};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Hard masks: binary entries, class row/column fully open, self
    /// always kept, and neighbor lists consistent with the dense matrix.
    #[test]
    fn hard_mask_invariants(
        rows in 1usize..8,
        cols in 1usize..8,
        r_idx in 0usize..3,
    ) {
        let r = [1, 3, 5][r_idx];
        let grid = PatchGrid::new(rows, cols).unwrap();
        let mask = build_mask(grid, MaskKind::Hard, r).unwrap();
        let t = grid.tokens() + 1;
        let dense = mask.dense();
        prop_assert_eq!(dense.rows(), t);
        prop_assert_eq!(dense.cols(), t);
        for i in 0..t {
            prop_assert_eq!(dense.at(0, i), 1.0);
            prop_assert_eq!(dense.at(i, 0), 1.0);
            prop_assert_eq!(dense.at(i, i), 1.0);
            for j in 0..t {
                let v = dense.at(i, j);
                prop_assert!(v == 0.0 || v == 1.0);
            }
        }
        // neighbor lists (patch indices) describe exactly the kept columns
        prop_assert_eq!(mask.neighbor_lists.len(), grid.tokens());
        for (p, nbrs) in mask.neighbor_lists.iter().enumerate() {
            for w in nbrs.windows(2) {
                prop_assert!(w[0] < w[1], "neighbor list must be ascending");
            }
            prop_assert!(nbrs.contains(&p), "self must be kept");
            for p2 in 0..grid.tokens() {
                let kept = dense.at(p + 1, p2 + 1) == 1.0;
                prop_assert_eq!(nbrs.contains(&p2), kept);
            }
        }
    }

    /// Any mix of per-head mask kinds survives a JSON round trip.
    #[test]
    fn scheme_json_round_trip(
        heads in 1usize..6,
        layout in proptest::collection::vec(
            proptest::collection::vec(0usize..4, 8),
            1..6,
        ),
    ) {
        let layers: Vec<Vec<HeadMask>> = layout
            .iter()
            .map(|row| {
                row[..heads]
                    .iter()
                    .map(|&k| match k {
                        0 => HeadMask::None,
                        1 => HeadMask::Hard { r: 3 },
                        2 => HeadMask::Soft { r: 5 },
                        _ => HeadMask::Random { r: 3 },
                    })
                    .collect()
            })
            .collect();
        let scheme = MaskScheme { layers };
        let back = MaskScheme::from_json(&scheme.to_json()).unwrap();
        prop_assert_eq!(back, scheme);
    }

    /// ALS of any row-stochastic map lies in [0, 1].
    #[test]
    fn als_is_bounded(
        rows in 2usize..6,
        cols in 2usize..6,
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let grid = PatchGrid::new(rows, cols).unwrap();
        let t = grid.tokens() + 1;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut map = Tensor::zeros(vec![t, t]);
        for i in 0..t {
            let row: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0f64..1.0) + 1e-12).collect();
            let z: f64 = row.iter().sum();
            for (j, v) in row.iter().enumerate() {
                map.set(i, j, v / z);
            }
        }
        let mask = build_mask(grid, MaskKind::Hard, 3).unwrap();
        let score = als(&map, &mask).unwrap();
        prop_assert!((0.0..=1.0).contains(&score));
    }
}

/// The CSV report mirrors training output: row per epoch, and the final
/// row's per-layer ALS columns equal the head-averaged ALS of the probe
/// record from the same run.
#[test]
fn metrics_csv_matches_training_run() {
    let grid = PatchGrid::new(4, 4).unwrap();
    let data = gen_local_task(grid, 1, 24, 11).unwrap();
    let (train, val) = data.split(0.25);
    let config = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        grid,
        patch_px: 1,
        channels: 1,
        classes: 2,
        ffn_ratio: 2,
        layerscale_eps: None,
        drop_path_rate: 0.0,
        scheme: make_scheme(SchemePreset::Sch1, 2, 2, 3).unwrap(),
        mask_seed: 0,
    };
    let mut params = init_params(&config, 4).unwrap();
    let opts = TrainOptions::toy(1, train.len(), 3);
    let out = train_loop(&config, &mut params, &train, &val, &opts).unwrap();

    let csv = metrics_csv(&out.stats, config.layers);
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "epoch,loss,accuracy,als_l0,als_l1");
    assert_eq!(lines.len(), 1 + out.stats.len());

    let table = als_table(out.record.as_ref().unwrap(), opts.als_r).unwrap();
    let last: Vec<&str> = lines.last().unwrap().split(',').collect();
    for (l, row) in table.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let got: f64 = last[3 + l].parse().unwrap();
        assert!((got - mean).abs() < 1e-9, "layer {l}: {got} vs {mean}");
    }
}

#[test]
fn metrics_csv_zero_epochs_is_header_only() {
    assert_eq!(metrics_csv(&[], 3), "epoch,loss,accuracy,als_l0,als_l1,als_l2\n");
}
