use proptest::prelude::*;

use asr::autodiff::{Graph, Tensor};
use asr::renderer::{default_scales, render_primitives, EllipseParams, RenderConfig, MAX_SCALE, MIN_SCALE};
use asr::training::{arv, schedule_step, LossConfig, ScheduleConfig};

const SIDE: usize = 32;

fn primitive() -> impl Strategy<Value = EllipseParams> {
    (MIN_SCALE..MAX_SCALE, MIN_SCALE..MAX_SCALE, 0.0..std::f64::consts::TAU, prop::array::uniform3(0.0..=1.0f64))
        .prop_map(|(w, h, d, a)| EllipseParams { w, h, d, a })
}

/// Cells for the 8x8, 4x4 and 2x2 grids.
fn scene() -> impl Strategy<Value = Vec<Vec<EllipseParams>>> {
    (prop::collection::vec(primitive(), 64), prop::collection::vec(primitive(), 16), prop::collection::vec(primitive(), 4))
        .prop_map(|(a, b, c)| vec![a, b, c])
}

fn render(cells: &[Vec<EllipseParams>], bg: [f64; 3]) -> Tensor<f64> {
    let cfg = RenderConfig { sharpness: 1.0, image_side: SIDE };
    render_primitives(&cfg, &default_scales(SIDE), cells, bg).unwrap()
}

fn arv_of(maps: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<_> = maps.iter().map(|m| g.constant(m.clone())).collect();
    let v = arv(&mut g, &vars, &LossConfig::default()).unwrap();
    g.value(v).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rendered_pixels_stay_in_unit_range(cells in scene(), bg in prop::array::uniform3(0.0..=1.0f64)) {
        let img = render(&cells, bg);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (c, &b) in bg.iter().enumerate() {
            prop_assert!(img.data()[c * SIDE * SIDE..(c + 1) * SIDE * SIDE].iter().all(|&v| v <= b));
        }
    }

    #[test]
    fn more_absorption_never_brightens(
        cells in scene(),
        scale in 0usize..3,
        pick in 0usize..64,
        ch in 0usize..3,
        t in 0.0..=1.0f64,
    ) {
        let cell = pick % cells[scale].len();
        let mut darker = cells.clone();
        let a = &mut darker[scale][cell].a[ch];
        *a += (1.0 - *a) * t;
        let bg = [0.95, 0.9, 0.85];
        let (lo, hi) = (render(&cells, bg), render(&darker, bg));
        for (i, (l, h)) in lo.data().iter().zip(hi.data()).enumerate() {
            if i / (SIDE * SIDE) == ch {
                prop_assert!(h <= l);
            } else {
                prop_assert_eq!(h, l);
            }
        }
    }

    #[test]
    fn arv_ignores_location_order(values in prop::collection::vec(0.0..=1.0f64, 64 * 3), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let build = |order: &[usize]| -> Vec<Tensor<f64>> {
            [8usize, 4, 2]
                .iter()
                .map(|&n| {
                    let cells = n * n;
                    Tensor::from_fn(&[1, 6, n, n], |i| {
                        let (c, cell) = (i / cells, i % cells);
                        if c < 3 { 0.5 } else { values[order[cell % order.len()] * 3 + c - 3] }
                    })
                })
                .collect()
        };
        let ident: Vec<usize> = (0..64).collect();
        let mut perm = ident.clone();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // only the 8x8 scale sees every location exactly once
        let (a, mut b) = (build(&ident), build(&perm));
        b[1] = a[1].clone();
        b[2] = a[2].clone();
        prop_assert!((arv_of(&a) - arv_of(&b)).abs() < 1e-12);
    }

    #[test]
    fn gates_never_decrease(e in 1usize..200) {
        let cfg = ScheduleConfig::default();
        let (now, next) = (schedule_step(e, &cfg), schedule_step(e + 1, &cfg));
        for (a, b) in now.gates.iter().zip(&next.gates) {
            prop_assert!(a <= b && *b <= 1.0);
        }
    }
}
