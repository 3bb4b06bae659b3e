//! Rough step-time measurement used to size the end-to-end runs. Ignored by
//! default; run with `cargo test -p colabseg --test bench_step -- --ignored
//! --nocapture`.

use colabseg::autodiff::AdamState;
use colabseg::loss::SegLossConfig;
use colabseg::unet::{UNet, UNetConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

#[test]
#[ignore]
fn measure_unet_step_time() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let net_cfg = UNetConfig::default();
    let mut net = UNet::<f32>::new(net_cfg, 1).unwrap();
    let mut adam = AdamState::new(net.params.values());
    let loss_cfg = SegLossConfig::default();
    let batch: Vec<(Array2<f32>, Array2<u8>)> = (0..4)
        .map(|_| {
            let img = Array2::from_shape_fn((128, 128), |_| rng.gen_range(-1.0f32..1.0));
            let mask = Array2::from_shape_fn((128, 128), |(r, c)| {
                u8::from((r as i32 - 64).pow(2) + (c as i32 - 64).pow(2) < 900)
            });
            (img, mask)
        })
        .collect();
    // Warm once, then time.
    colabseg::test_support::supervised_step_for_bench(&mut net, &batch, &loss_cfg, 1e-4, &mut adam)
        .unwrap();
    let n = 10;
    let started = std::time::Instant::now();
    for _ in 0..n {
        colabseg::test_support::supervised_step_for_bench(
            &mut net, &batch, &loss_cfg, 1e-4, &mut adam,
        )
        .unwrap();
    }
    let per_step = started.elapsed().as_secs_f64() / n as f64;
    println!("unet 128x128 batch-4 step: {per_step:.3} s");
}
