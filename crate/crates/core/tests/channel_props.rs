use flowmark_core::channel::{transmit, ChannelModel, Defense};
use flowmark_core::shaper::{generate_source, shape, SourceKind, SourceModel, TokenBucketConfig};
use flowmark_core::trace::{throughput_bins, FlowTrace};
use flowmark_core::waveform::{ModulationSpec, WaveKind};
use proptest::prelude::*;

fn poisson(rate: f64, secs: f64, seed: u64) -> FlowTrace {
    let m = SourceModel {
        kind: SourceKind::PoissonArrivals,
        ..SourceModel::constant(rate, 1000, seed)
    };
    FlowTrace::new("f", 0).with_packets(generate_source(&m, secs).unwrap())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Best correlation of `series` against `spec`'s per-second mean rate over
/// all whole-second lags within one period.
fn peak_xcorr(series: &[f64], spec: &ModulationSpec) -> f64 {
    let period = spec.period().round() as usize;
    (0..period)
        .map(|lag| {
            let reference: Vec<f64> = (0..series.len())
                .map(|i| {
                    let t = (i + lag) as f64;
                    spec.integral_bounded(t, t + 1.0)
                })
                .collect();
            pearson(series, &reference)
        })
        .fold(f64::MIN, f64::max)
}

#[test]
fn throughput_shape_survives_moderate_noise() {
    let kinds = [WaveKind::Sine, WaveKind::Square, WaveKind::Triangle];
    for (k, &kind) in kinds.iter().enumerate() {
        let spec = ModulationSpec::with_defaults(kind, 1e5);
        let input = poisson(1e6, 300.0, k as u64);
        let shaped = shape(&input, &spec, &TokenBucketConfig::default()).unwrap();
        let out = transmit(&shaped, &ChannelModel::new(0.05, 0.3, 0.01, 10 + k as u64)).unwrap();
        let mut bins = throughput_bins(&out, 1.0).unwrap();
        bins.truncate(290);
        let own = peak_xcorr(&bins, &spec);
        for &other in kinds.iter().filter(|&&o| o != kind) {
            let theirs = peak_xcorr(&bins, &ModulationSpec::with_defaults(other, 1e5));
            assert!(own > theirs, "{kind:?}: {own} vs {other:?} {theirs}");
        }
    }
}

#[test]
fn loss_count_is_binomial() {
    let input = FlowTrace::new("f", 0).with_packets(
        generate_source(&SourceModel::constant(1e6, 100, 0), 1.0).unwrap(),
    );
    assert_eq!(input.packets.len(), 10_000);
    let out = transmit(&input, &ChannelModel::new(0.0, 0.0, 0.05, 3)).unwrap();
    let sd = (10_000.0f64 * 0.05 * 0.95).sqrt();
    assert!((out.packets.len() as f64 - 9500.0).abs() <= 3.0 * sd);
}

#[test]
fn padding_fills_one_long_gap() {
    let mut input = poisson(1e4, 1.0, 1);
    input.packets.truncate(1);
    let mut late = input.packets[0].clone();
    late.ts_us += 1_000_000;
    input.packets.push(late);
    let ch = ChannelModel {
        defense: Defense::PadIdleGaps {
            threshold: 0.05,
            pad_interval: 0.05,
            pad_size: 200,
        },
        ..ChannelModel::new(0.0, 0.0, 0.0, 0)
    };
    let out = transmit(&input, &ch).unwrap();
    assert_eq!(out.packets.iter().filter(|p| p.is_dummy).count(), 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clean_path_is_a_translation(seed in any::<u64>(), delay in 0.0f64..1.0) {
        let input = poisson(1e5, 2.0, seed);
        let out = transmit(&input, &ChannelModel::new(delay, 0.0, 0.0, seed)).unwrap();
        let shift = (delay * 1e6).round() as u64;
        prop_assert_eq!(out.packets.len(), input.packets.len());
        for (a, b) in input.packets.iter().zip(&out.packets) {
            prop_assert_eq!(b.ts_us, a.ts_us + shift);
        }
    }

    #[test]
    fn survivors_keep_order_bytes_and_determinism(seed in any::<u64>(), sigma in 0.0f64..1.0, loss in 0.0f64..0.3) {
        let input = poisson(2e5, 2.0, seed);
        let ch = ChannelModel::new(0.05, sigma, loss, seed ^ 1);
        let out = transmit(&input, &ch).unwrap();
        prop_assert!(out.is_sorted());
        prop_assert_eq!(out.to_jsonl(), transmit(&input, &ch).unwrap().to_jsonl());
        // survivors appear in input order with their payloads intact
        let mut j = 0;
        for p in &out.packets {
            while input.packets[j].payload != p.payload {
                j += 1;
            }
            prop_assert_eq!(input.packets[j].size, p.size);
            prop_assert!(p.ts_us >= input.packets[j].ts_us);
            j += 1;
        }
    }
}
