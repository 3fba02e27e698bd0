use std::f64::consts::PI;

use srt_core::audio::{frame_samples, hann, FeatureExtractor, MelConfig, Waveform};

#[test]
fn tone_matches_a_direct_dft() {
    let cfg = MelConfig::default();
    let samples: Vec<f32> = (0..16_000)
        .map(|i| (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin() as f32 * 0.5)
        .collect();
    let fx = FeatureExtractor::new(cfg.clone());
    let feats = fx.extract(&Waveform::new(samples.clone(), 16_000).unwrap()).unwrap();
    let window = hann(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    for frame in [0, 37, 99] {
        let x: Vec<f64> = frame_samples(&samples, frame, &cfg).iter().zip(&window).map(|(a, w)| a * w).collect();
        let power: Vec<f64> = (0..n_bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / cfg.n_fft as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect();
        for (m, filt) in fx.filters().rows().into_iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(f, p)| f * p).sum();
            let want = e.max(cfg.floor).log10();
            let got = feats.frames[[frame, m]];
            assert!((got - want).abs() < 1e-9, "frame {frame} mel {m}: {got} vs {want}");
        }
    }
    // The loudest band is the filter whose peak lies closest to 440 Hz.
    let row = feats.frames.row(50);
    let loudest = (0..cfg.n_mels).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    let peak_hz = |m: usize| {
        let f = fx.filters().row(m);
        let k = (0..n_bins).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        k as f64 * 16_000.0 / cfg.n_fft as f64
    };
    let nearest = (0..cfg.n_mels)
        .min_by(|&a, &b| (peak_hz(a) - 440.0).abs().total_cmp(&(peak_hz(b) - 440.0).abs()))
        .unwrap();
    assert!(loudest.abs_diff(nearest) <= 1, "loudest {loudest}, nearest {nearest}");
}
