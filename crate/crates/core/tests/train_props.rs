use std::path::Path;

use ngf_core::diffcore::{ParamStore, Tensor};
use ngf_core::train::{fit_inverse_gauge, train, Checkpoint, GaugeKind, InverseFit, TrainConfig};
use proptest::prelude::*;

fn tiny(overrides: &[&str]) -> TrainConfig {
    let mut all = vec![
        "scene.width=8",
        "scene.height=8",
        "scene.train_views=1",
        "scene.test_views=1",
        "scene.gt_samples=32",
        "rays_per_batch=64",
        "samples_per_ray=16",
        "eval_samples=16",
        "occupancy_supersample=1",
        "occupancy_grid=8",
        "field.hidden=[16]",
        "continuous.hidden=[16]",
        "lr=0.01",
    ];
    all.extend_from_slice(overrides);
    TrainConfig::default().with_overrides(&all).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        tensors in prop::collection::vec(prop::collection::vec(any::<f64>(), 1..20), 1..5),
        step in any::<u64>(),
        hash in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        for (i, d) in tensors.iter().enumerate() {
            store.add(format!("t{i}"), Tensor::vector(d.clone()));
        }
        let c = Checkpoint::from_store(&store, step, hash);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.config_hash, hash);
        let mut restored = store.clone();
        for id in restored.ids().collect::<Vec<_>>() {
            restored.get_mut(id).data_mut().fill(0.0);
        }
        back.restore(&mut restored).unwrap();
        for id in store.ids() {
            let a: Vec<u64> = store.get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = restored.get(id).data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn training_raises_psnr_on_a_single_image() {
    let cfg = tiny(&["steps=500", "log_every=50", "gauge=\"grid\"", "grid.resolution=6", "grid.channels=8"]);
    let out = train(&cfg).unwrap();
    let rows = &out.log.rows;
    let (first, last) = (rows.first().unwrap(), rows.last().unwrap());
    assert_eq!(first.step, 0);
    assert!(last.psnr > first.psnr, "{} -> {}", first.psnr, last.psnr);
}

#[test]
fn metric_log_is_ordered_and_finite() {
    let cfg = tiny(&["steps=30", "log_every=5", "regularizer.kind=\"inforeg\""]);
    assert_eq!(cfg.gauge, GaugeKind::Continuous);
    let out = train(&cfg).unwrap();
    let rows = &out.log.rows;
    assert!(rows.len() >= 6);
    assert!(rows.windows(2).all(|w| w[1].step > w[0].step));
    for r in rows {
        assert!(r.loss.is_finite() && r.psnr.is_finite());
        assert!(r.occupancy.is_none_or(f64::is_finite));
    }
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn inverse_of_identity_gauge_is_learned() {
    // Points on the z = 1/2 slice, mapped to their (x, y) coordinates.
    let n = 400;
    let mut pts = Vec::with_capacity(3 * n);
    let mut uv = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (x, y) = ((i % 20) as f64 / 19.0, (i / 20) as f64 / 19.0);
        pts.extend_from_slice(&[x, y, 0.5]);
        uv.extend_from_slice(&[x, y]);
    }
    let points = Tensor::new(vec![n, 3], pts).unwrap();
    let coords = Tensor::new(vec![n, 2], uv).unwrap();
    let fit = InverseFit {
        steps: 1500,
        batch: 128,
        hidden: vec![32, 32],
        ..InverseFit::default()
    };
    let inv = fit_inverse_gauge(&points, &coords, &vec![1.0; n], &fit).unwrap();
    let loss = inv.loss(&points, &coords).unwrap();
    assert!(loss < 1e-3, "{loss}");
}
