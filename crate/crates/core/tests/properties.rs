use proptest::prelude::*;

use gsvq::codec::{decode_bytes, encode_to_vec, size_report};
use gsvq::compress::{finetune_frozen, CompressionConfig, Group, QuantizedCloud};
use gsvq::metrics::psnr_from_mse;
use gsvq::render::{Camera, Frame};
use gsvq::splat::{GaussianSplat, SplatCloud};
use gsvq::vq::{quantize_nsvq, Codebook};

fn camera(size: u32) -> Camera {
    Camera {
        view: [
            1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        ],
        fx: 16.0,
        fy: 16.0,
        cx: f64::from(size / 2),
        cy: f64::from(size / 2),
        width: size,
        height: size,
        near: 0.01,
    }
}

fn codebook(dim: usize) -> impl Strategy<Value = Codebook> {
    (1usize..12).prop_flat_map(move |k| {
        proptest::collection::vec(-3.0f32..3.0, k * dim).prop_map(move |v| Codebook::new(dim, v).unwrap())
    })
}

fn splat() -> impl Strategy<Value = GaussianSplat> {
    (
        [-0.6f32..0.6, -0.6f32..0.6, 1.0f32..4.0],
        -4.0f32..4.0,
        [-3.0f32..-0.5, -3.0f32..-0.5, -3.0f32..-0.5],
        [0.1f32..1.0, -1.0f32..1.0, -1.0f32..1.0, -1.0f32..1.0],
        [-2.0f32..2.0, -2.0f32..2.0, -2.0f32..2.0],
    )
        .prop_map(|(position, opacity, log_scale, rotation, color_dc)| GaussianSplat {
            position,
            opacity,
            log_scale,
            rotation,
            color_dc,
            ..Default::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nsvq_moves_input_by_hard_distance(
        (cb, t) in (prop_oneof![Just(3usize), Just(4), Just(45)])
            .prop_flat_map(|d| (codebook(d), proptest::collection::vec(-3.0f32..3.0, d))),
        seed in any::<u64>(),
    ) {
        let mut rng = gsvq::rng::stream(seed, &[]);
        let s = quantize_nsvq(&t, &cb, &mut rng).unwrap();
        let moved = s.surrogate.iter().zip(&t).map(|(a, x)| (a - f64::from(*x)).powi(2)).sum::<f64>().sqrt();
        prop_assert!((moved - s.distance).abs() <= 1e-6 * s.distance.max(1e-300));
        for k in 0..cb.entries() {
            let d = cb.vector(k).iter().zip(&t).map(|(z, x)| (f64::from(*x) - f64::from(*z)).powi(2)).sum::<f64>().sqrt();
            prop_assert!(s.distance <= d + 1e-12);
        }
    }

    #[test]
    fn usage_counts_sum_to_calls(cb in codebook(4), ts in proptest::collection::vec([-3.0f32..3.0, -3.0f32..3.0, -3.0f32..3.0, -3.0f32..3.0], 1..50)) {
        cb.reset_usage();
        for t in &ts {
            cb.quantize_hard(t).unwrap();
        }
        prop_assert_eq!(cb.usage_counts().iter().sum::<u64>(), ts.len() as u64);
        let f = cb.active_fraction();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn accumulated_weight_in_unit_interval(splats in proptest::collection::vec(splat(), 1..12)) {
        let cloud = SplatCloud::new(splats, 0).unwrap();
        let w = Frame::new(&cloud, &camera(12)).unwrap().blend_weights();
        for p in 0..12 * 12 {
            let c = w.coverage(p);
            prop_assert!((0.0..=1.0).contains(&c), "{}", c);
            prop_assert!(w.final_transmittance(p) >= 0.0);
        }
    }

    #[test]
    fn codec_round_trip_and_stream_lengths(
        n in 0usize..40,
        bits in [1u32..7, 1u32..7, 1u32..7, 1u32..7],
        deg in 1u8..=3,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = gsvq::rng::stream(seed, &[]);
        let codebooks = Group::ALL.map(|g| {
            let e = 1usize << bits[g.index()];
            Codebook::new(g.dim(), (0..e * g.dim()).map(|_| r.random_range(-1.0f32..1.0)).collect()).unwrap()
        });
        let q = QuantizedCloud::new(
            (0..n).map(|_| [r.random(), r.random(), r.random()]).collect(),
            (0..n).map(|_| r.random()).collect(),
            bits.map(|b| (0..n).map(|_| r.random_range(0..1u32 << b)).collect()),
            codebooks,
            deg,
        ).unwrap();
        let bytes = encode_to_vec(&q);
        let report = size_report(&q);
        prop_assert_eq!(bytes.len() as u64, report.total);
        for g in 0..4 {
            prop_assert_eq!(report.index_streams[g], (n as u64 * u64::from(bits[g])).div_ceil(8));
        }
        let back = decode_bytes(&bytes).unwrap();
        prop_assert_eq!(encode_to_vec(&back), bytes);
    }

    #[test]
    fn lower_mse_gives_higher_psnr(a in 1e-12f64..10.0, b in 1e-12f64..10.0) {
        prop_assume!(a != b);
        prop_assert_eq!(a < b, psnr_from_mse(a) > psnr_from_mse(b));
    }
}

#[test]
fn finetune_moves_entries_toward_assignment_means() {
    use rand::Rng;
    let mut r = gsvq::rng::stream(8, &[]);
    let splats: Vec<GaussianSplat> = (0..200)
        .map(|_| GaussianSplat {
            log_scale: [0; 3].map(|_: i32| r.random_range(-4.0..-1.0)),
            rotation: [0; 4].map(|_: i32| r.random_range(-1.0..1.0)),
            color_dc: [0; 3].map(|_: i32| r.random_range(-1.0..1.0)),
            ..Default::default()
        })
        .collect();
    let cloud = SplatCloud::new(splats, 0).unwrap();
    let codebooks = Group::ALL.map(|g| {
        let e = if g == Group::Sh { 1 } else { 8 };
        Codebook::new(
            g.dim(),
            (0..e * g.dim()).map(|_| r.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    });
    let q = QuantizedCloud::new(
        vec![[0.0; 3]; 200],
        vec![0.0; 200],
        Group::ALL.map(|g| {
            if g == Group::Sh {
                vec![0; 200]
            } else {
                (0..200).map(|_| r.random_range(0..8u32)).collect()
            }
        }),
        codebooks,
        0,
    )
    .unwrap();
    let cfg = CompressionConfig {
        finetune_steps: 3,
        ..Default::default()
    };
    let tuned = finetune_frozen(&q, &cloud, &cfg, None).unwrap();
    for g in [Group::Scale, Group::Rotation, Group::Colour] {
        assert_eq!(tuned.indices(g), q.indices(g));
        for k in 0..8 {
            let members: Vec<&GaussianSplat> = cloud
                .splats
                .iter()
                .zip(q.indices(g))
                .filter(|(_, &i)| i as usize == k)
                .map(|(s, _)| s)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..g.dim())
                .map(|c| members.iter().map(|s| f64::from(g.get(s)[c])).sum::<f64>() / members.len() as f64)
                .collect();
            let dist = |cb: &Codebook| {
                cb.vector(k)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (f64::from(*a) - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            assert!(dist(tuned.codebook(g)) <= dist(q.codebook(g)) + 1e-6, "{g} entry {k}");
        }
    }
}
