use duvio_core::dehaze::{image_metrics, train_dehazer, DehazeTrainConfig, DiscriminatorConfig, GeneratorConfig};
use duvio_core::disturb::{apply_turbidity, TurbidityParams};
use duvio_core::raster::Raster;

fn texture(w: usize, h: usize, phase: f64) -> Raster {
    Raster::from_fn(w, h, |x, y| {
        let (x, y) = (x as f64, y as f64);
        (0.5 + 0.25 * (x * 0.8 + phase).sin() * (y * 0.6 - phase).cos() + 0.15 * ((x + y) * 0.3 + 2.0 * phase).sin())
            .clamp(0.0, 1.0)
    })
    .quantize8()
}

fn gen_cfg() -> GeneratorConfig {
    GeneratorConfig { base_channels: 8, depth: 2, ..GeneratorConfig::default() }
}

fn disc_cfg() -> DiscriminatorConfig {
    DiscriminatorConfig { layers: 3, base_channels: 8, ..DiscriminatorConfig::default() }
}

#[test]
fn identity_overfit_reaches_40_db() {
    let clean = texture(16, 16, 0.3);
    let cfg = DehazeTrainConfig { epochs: 200, batch_size: 1, learning_rate: 1e-3, data_fraction: 1.0, seed: 1, ..DehazeTrainConfig::default() };
    let out = train_dehazer(&[(clean.clone(), clean.clone())], &gen_cfg(), &disc_cfg(), &cfg).unwrap();
    let psnr = image_metrics(&clean, &out.generator.generate(&clean).unwrap()).unwrap().psnr;
    assert!(psnr >= 40.0, "identity PSNR {psnr:.2} dB");
}

#[test]
fn dehazing_beats_hazy_input() {
    let haze = TurbidityParams::constant(0.6, 0.8, 2.0);
    let pairs: Vec<_> = (0..6)
        .map(|i| {
            let clean = texture(16, 16, i as f64 * 0.7);
            (apply_turbidity(&clean, &haze).quantize8(), clean)
        })
        .collect();
    let cfg = DehazeTrainConfig { epochs: 60, batch_size: 2, learning_rate: 1e-3, data_fraction: 1.0, seed: 2, ..DehazeTrainConfig::default() };
    let out = train_dehazer(&pairs, &gen_cfg(), &disc_cfg(), &cfg).unwrap();
    let clean = texture(16, 16, 5.0);
    let hazy = apply_turbidity(&clean, &haze).quantize8();
    let before = image_metrics(&clean, &hazy).unwrap().psnr;
    let after = image_metrics(&clean, &out.generator.generate(&hazy).unwrap()).unwrap().psnr;
    assert!(after > before, "hazy {before:.2} dB, dehazed {after:.2} dB");
}

#[test]
fn discriminator_separates_toy_data() {
    // the generator barely moves in a few epochs, so its outputs stay hazy
    let haze = TurbidityParams::constant(2.0, 0.9, 2.0);
    let pairs: Vec<_> = (0..8)
        .map(|i| {
            let clean = texture(16, 16, i as f64);
            (apply_turbidity(&clean, &haze).quantize8(), clean)
        })
        .collect();
    let cfg = DehazeTrainConfig { epochs: 15, batch_size: 4, learning_rate: 1e-3, data_fraction: 1.0, seed: 3, lambda_l1: 0.0, ..DehazeTrainConfig::default() };
    let out = train_dehazer(&pairs, &gen_cfg(), &disc_cfg(), &cfg).unwrap();
    let mean = |imgs: Vec<Raster>| imgs.iter().map(|i| out.discriminator.discriminate(i).unwrap()).sum::<f64>() / imgs.len() as f64;
    let real = mean(pairs.iter().map(|p| p.1.clone()).collect());
    let fake = mean(pairs.iter().map(|p| out.generator.generate(&p.0).unwrap()).collect());
    assert!(real > fake, "real {real:.3} fake {fake:.3}");
}
