use nerfsup::dataio::holdout_split;
use nerfsup::evalsynth::{psnr, FixtureSpec};
use nerfsup::optimizer::{train, TrainConfig};
use nerfsup::render::{render_view, DEFAULT_SAMPLES};

fn small() -> TrainConfig {
    TrainConfig {
        iterations: 20,
        batch_size: 64,
        depth_batch_size: 16,
        samples: 32,
        resolution: [8; 3],
        ..Default::default()
    }
}

#[test]
fn slab_holdout_psnr_and_loss_windows() {
    let data = FixtureSpec::named("slab", 0, None).unwrap().render().unwrap();
    let (train_set, test) = holdout_split(&data.images, 8, 0).unwrap();
    let out = train(&train_set, data.spec.scene.bbox, &TrainConfig::default()).unwrap();
    let mean: f64 = test
        .iter()
        .map(|img| {
            let view = render_view(&out.field, &img.intr, &img.pose, DEFAULT_SAMPLES).unwrap();
            psnr(&view.color, &img.pixels).unwrap()
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!(mean >= 25.0, "held-out PSNR {mean:.2} dB");

    // Window means with their standard errors; sampled batches make single
    // steps noisy, so a later window may exceed an earlier one by at most
    // two standard errors of the difference.
    let windows: Vec<(f64, f64)> = out
        .losses
        .chunks(100)
        .map(|w| {
            let n = w.len() as f64;
            let mean = w.iter().map(|r| r.total).sum::<f64>() / n;
            let var = w.iter().map(|r| (r.total - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        })
        .collect();
    for pair in windows.windows(2) {
        let ((m0, s0), (m1, s1)) = (pair[0], pair[1]);
        assert!(m1 <= m0 + 2.0 * s0.hypot(s1), "window means {windows:?}");
    }
    assert!(windows.last().unwrap().0 < 0.05 * windows[0].0);
}

#[test]
fn depth_supervision_drives_expected_depth_to_truth() {
    let data = FixtureSpec::named("slab", 0, Some(4)).unwrap().render().unwrap();
    let cfg = TrainConfig {
        iterations: 500,
        batch_size: 128,
        depth_batch_size: 64,
        samples: 64,
        resolution: [16; 3],
        ..Default::default()
    };
    let out = train(&data.images, data.spec.scene.bbox, &cfg).unwrap();
    let early: f64 = out.losses[..10].iter().map(|r| r.depth).sum::<f64>() / 10.0;
    let late: f64 = out.losses[490..].iter().map(|r| r.depth).sum::<f64>() / 10.0;
    assert!(late <= 0.1 * early, "depth loss {early:.5} -> {late:.5}");
}

#[test]
fn zero_depth_weight_ignores_depth_data() {
    let data = FixtureSpec::named("slab", 1, Some(3)).unwrap().render().unwrap();
    let cfg = TrainConfig {
        depth_loss_weight: 0.0,
        ..small()
    };
    let with = train(&data.images, data.spec.scene.bbox, &cfg).unwrap();
    let mut stripped = data.images.clone();
    for img in &mut stripped {
        img.sparse_depth.clear();
    }
    let without = train(&stripped, data.spec.scene.bbox, &cfg).unwrap();
    assert_eq!(with.field, without.field);
}

#[test]
fn image_order_does_not_matter() {
    let data = FixtureSpec::named("slab", 2, Some(4)).unwrap().render().unwrap();
    let a = train(&data.images, data.spec.scene.bbox, &small()).unwrap();
    let mut shuffled = data.images.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let b = train(&shuffled, data.spec.scene.bbox, &small()).unwrap();
    assert_eq!(a.field, b.field);
    assert_eq!(a.losses, b.losses);
    let c = train(&data.images, data.spec.scene.bbox, &small()).unwrap();
    assert_eq!(a.field, c.field);
}
