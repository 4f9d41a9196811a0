mod common;

use nalgebra::{DMatrix, Vector3};
use panoepi_core::attention::{
    attention_weights, full_attention, masked_attention, AttentionParams, CandidateLists,
};
use panoepi_core::camera::{EquirectGrid, Pose4DoF};
use panoepi_core::grid::FeatureGrid;
use panoepi_core::ray::{
    ray_attention_grad, ray_pixel_attention, read_params, refine_step, write_params, HeadWeights,
    Offsets, RayAttentionParams, RaySampleConfig,
};
use panoepi_core::triplane::{
    read_triplane, sample_3d, write_triplane, Extent, PlaneAxis, Triplane, TriplaneConfig,
    TriplaneExtents,
};
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn config(res: usize, channels: usize) -> TriplaneConfig {
    TriplaneConfig {
        extents: TriplaneExtents {
            x: Extent::new(-20.0, 20.0).unwrap(),
            y: Extent::new(-20.0, 20.0).unwrap(),
            z: Extent::new(-4.0, 12.0).unwrap(),
        },
        resolution: res,
        channels,
    }
}

fn random_triplane(rng: &mut impl Rng, res: usize, channels: usize) -> Triplane {
    Triplane::from_fn(&config(res, channels), |_, _, _, _| {
        rng.random_range(-1.0..1.0)
    })
    .unwrap()
}

fn interior_point(rng: &mut impl Rng) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-19.0..19.0),
        rng.random_range(-19.0..19.0),
        rng.random_range(-3.5..11.5),
    )
}

#[test]
fn triplane_sample_is_sum_of_three_bilinear_oracles() {
    let mut r = rng(21);
    let tp = random_triplane(&mut r, 9, 4);
    let e = tp.extents();
    for _ in 0..1000 {
        let x = interior_point(&mut r);
        let got = sample_3d(&tp, &x).unwrap();
        let mut want = vec![0.0; 4];
        for axis in PlaneAxis::ALL {
            let (a, b) = axis.axes();
            let (ea, eb) = (e.axis(a), e.axis(b));
            let gx = (x[a] - ea.min) / (ea.max - ea.min) * 8.0;
            let gy = (x[b] - eb.min) / (eb.max - eb.min) * 8.0;
            let p = tp.plane(axis).features();
            for (w, s) in want
                .iter_mut()
                .zip(bilinear_oracle(p.data(), 9, 9, 4, gx, gy))
            {
                *w += s;
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn triplane_gradient_matches_finite_differences() {
    let mut r = rng(22);
    let tp = random_triplane(&mut r, 7, 3);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 500 {
        let x = interior_point(&mut r);
        let g = tp.gradient(&x).unwrap();
        if g.on_boundary {
            continue;
        }
        for axis in 0..3 {
            let mut dx = Vector3::zeros();
            dx[axis] = h;
            let (Ok(p), Ok(m)) = (tp.sample(&(x + dx)), tp.sample(&(x - dx))) else {
                continue;
            };
            for ch in 0..3 {
                let fd = (p[ch] - m[ch]) / (2.0 * h);
                let an = g.jacobian[ch][axis];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "{fd} vs {an}");
            }
        }
        checked += 1;
    }
}

#[test]
fn ray_gradients_match_finite_differences() {
    let mut r = rng(23);
    let tp = random_triplane(&mut r, 9, 3);
    let g = EquirectGrid::new(64, 32).unwrap();
    let cfg = RaySampleConfig {
        samples: 4,
        near: 1.0,
        far: 8.0,
        heads: 2,
    };
    let h = 1e-6;
    let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * an.abs().max(1e-2);
    let mut checked = 0;
    while checked < 100 {
        let pose = Pose4DoF::new(
            Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), 1.6),
            r.random_range(-3.0..3.0),
        )
        .to_se3();
        let px = (r.random_range(0.0..64.0), r.random_range(12.0..20.0));
        let along = checked % 2 == 0;
        let mut p = RayAttentionParams::initial(&cfg, along);
        for l in p.logits.iter_mut() {
            *l = r.random_range(-2.0..2.0);
        }
        p.offsets = if along {
            Offsets::AlongRay((0..8).map(|_| r.random_range(-0.5..0.5)).collect())
        } else {
            Offsets::Free(
                (0..8)
                    .map(|_| {
                        Vector3::new(
                            r.random_range(-0.5..0.5),
                            r.random_range(-0.5..0.5),
                            r.random_range(-0.5..0.5),
                        )
                    })
                    .collect(),
            )
        };
        let Ok(jac) = ray_attention_grad(&tp, &pose, px, &g, &cfg, &p) else {
            continue;
        };
        if jac.on_boundary {
            continue;
        }
        let eval = |q: &RayAttentionParams| ray_pixel_attention(&tp, &pose, px, &g, &cfg, q);
        for i in 0..8 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.logits[i] += h;
            b.logits[i] -= h;
            let (fa, fb) = (eval(&a).unwrap(), eval(&b).unwrap());
            for ch in 0..3 {
                assert!(close((fa[ch] - fb[ch]) / (2.0 * h), jac.d_logits[i][ch]));
            }
            match &p.offsets {
                Offsets::AlongRay(o) => {
                    let mut oa = o.clone();
                    let mut ob = o.clone();
                    oa[i] += h;
                    ob[i] -= h;
                    a = p.clone();
                    a.offsets = Offsets::AlongRay(oa);
                    b = p.clone();
                    b.offsets = Offsets::AlongRay(ob);
                    let (Ok(fa), Ok(fb)) = (eval(&a), eval(&b)) else {
                        continue;
                    };
                    let an = jac.d_along_ray(i);
                    for ch in 0..3 {
                        assert!(close((fa[ch] - fb[ch]) / (2.0 * h), an[ch]));
                    }
                }
                Offsets::Free(o) => {
                    for axis in 0..3 {
                        let mut oa = o.clone();
                        let mut ob = o.clone();
                        oa[i][axis] += h;
                        ob[i][axis] -= h;
                        a = p.clone();
                        a.offsets = Offsets::Free(oa);
                        b = p.clone();
                        b.offsets = Offsets::Free(ob);
                        let (Ok(fa), Ok(fb)) = (eval(&a), eval(&b)) else {
                            continue;
                        };
                        for ch in 0..3 {
                            assert!(close(
                                (fa[ch] - fb[ch]) / (2.0 * h),
                                jac.d_offsets[i][ch][axis]
                            ));
                        }
                    }
                }
            }
        }
        checked += 1;
    }
}

#[test]
fn refine_steps_reduce_loss() {
    let mut r = rng(24);
    let tp = random_triplane(&mut r, 9, 2);
    let g = EquirectGrid::new(64, 32).unwrap();
    let cfg = RaySampleConfig {
        samples: 6,
        near: 1.0,
        far: 10.0,
        heads: 2,
    };
    let pose = Pose4DoF::new(Vector3::new(0.0, 0.0, 1.6), 0.4).to_se3();
    let px = (20.5, 16.5);
    let target = [0.7, -0.3];
    let loss = |p: &RayAttentionParams| {
        let f = ray_pixel_attention(&tp, &pose, px, &g, &cfg, p).unwrap();
        0.5 * f
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    let mut p = RayAttentionParams::initial(&cfg, true);
    let start = loss(&p);
    for _ in 0..30 {
        let jac = ray_attention_grad(&tp, &pose, px, &g, &cfg, &p).unwrap();
        let grads = jac.loss_gradient(&target, &p).unwrap();
        p = refine_step(&p, &grads, 0.5).unwrap();
    }
    assert!(loss(&p) < start);
}

#[test]
fn masked_attention_matches_loop_oracle() {
    let mut r = rng(25);
    let c = 4;
    for trial in 0..10 {
        let (rows, cols) = (3, 5);
        let frames: Vec<FeatureGrid> = (0..3)
            .map(|_| FeatureGrid::from_fn(rows, cols, c, |_, _, _| r.random_range(-1.0..1.0)))
            .collect();
        let (wq, wk, wv) = (
            random_matrix(&mut r, c, 1.0),
            random_matrix(&mut r, c, 1.0),
            random_matrix(&mut r, c, 1.0),
        );
        let to_d = |m: &Vec<Vec<f64>>| DMatrix::from_fn(c, c, |i, j| m[i][j]);
        let params = AttentionParams::new(to_d(&wq), to_d(&wk), to_d(&wv), c as f64).unwrap();
        let n_keys = 2 * rows * cols;
        let rows_list: Vec<Vec<usize>> = (0..rows * cols)
            .map(|q| {
                if (q + trial) % 7 == 0 {
                    return Vec::new();
                }
                (0..n_keys).filter(|_| r.random_bool(0.3)).collect()
            })
            .collect();
        let lists =
            CandidateLists::from_rows(rows_list.iter().map(|row| row.iter().map(|&k| k as u32)));
        let out = masked_attention(&frames[0], &[&frames[1], &frames[2]], &lists, &params).unwrap();
        let q_feats: Vec<Vec<f64>> = (0..rows * cols)
            .map(|i| frames[0].cell(i).to_vec())
            .collect();
        let kv: Vec<Vec<f64>> = (0..rows * cols)
            .map(|i| frames[1].cell(i).to_vec())
            .chain((0..rows * cols).map(|i| frames[2].cell(i).to_vec()))
            .collect();
        let want = attention_oracle(&q_feats, &kv, &rows_list, &wq, &wk, &wv, c as f64);
        for (i, w) in want.iter().enumerate() {
            for (a, b) in out.features.cell(i).iter().zip(w) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(
            out.stats.score_evals,
            rows_list.iter().map(|r| r.len() as u64).sum::<u64>()
        );
        assert_eq!(
            out.stats.empty_queries,
            rows_list.iter().filter(|r| r.is_empty()).count() as u64
        );
    }
}

#[test]
fn full_attention_matches_dense_oracle() {
    let mut r = rng(26);
    let c = 3;
    let q = FeatureGrid::from_fn(4, 6, c, |_, _, _| r.random_range(-1.0..1.0));
    let k = FeatureGrid::from_fn(4, 6, c, |_, _, _| r.random_range(-1.0..1.0));
    let (wq, wk, wv) = (
        random_matrix(&mut r, c, 1.0),
        random_matrix(&mut r, c, 1.0),
        random_matrix(&mut r, c, 1.0),
    );
    let to_d = |m: &Vec<Vec<f64>>| DMatrix::from_fn(c, c, |i, j| m[i][j]);
    let params = AttentionParams::new(to_d(&wq), to_d(&wk), to_d(&wv), 2.0).unwrap();
    let out = full_attention(&q, &[&k], &params).unwrap();
    let qf: Vec<Vec<f64>> = (0..24).map(|i| q.cell(i).to_vec()).collect();
    let kf: Vec<Vec<f64>> = (0..24).map(|i| k.cell(i).to_vec()).collect();
    let all: Vec<Vec<usize>> = (0..24).map(|_| (0..24).collect()).collect();
    let want = attention_oracle(&qf, &kf, &all, &wq, &wk, &wv, 2.0);
    for (i, w) in want.iter().enumerate() {
        for (a, b) in out.features.cell(i).iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplane_is_linear(seed in any::<u64>(), alpha in -3.0..3.0f64, x in -19.0..19.0f64, y in -19.0..19.0f64, z in -3.0..11.0f64) {
        let mut r = rng(seed);
        let a = random_triplane(&mut r, 5, 2);
        let b = random_triplane(&mut r, 5, 2);
        let scaled = Triplane::from_fn(&config(5, 2), |axis, row, col, ch| alpha * a.plane(axis).features().at(row, col)[ch]).unwrap();
        let p = Vector3::new(x, y, z);
        let sum = a.add(&b).unwrap().sample(&p).unwrap();
        let (sa, sb) = (a.sample(&p).unwrap(), b.sample(&p).unwrap());
        let ss = scaled.sample(&p).unwrap();
        for ch in 0..2 {
            prop_assert!((sum[ch] - sa[ch] - sb[ch]).abs() < 1e-12);
            prop_assert!((ss[ch] - alpha * sa[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn triplane_file_round_trip(seed in any::<u64>(), res in 2usize..6, c in 1usize..4) {
        let mut r = rng(seed);
        let tp = Triplane::from_fn(&config(res, c), |_, _, _, _| r.random_range(-1.0f32..1.0) as f64).unwrap();
        let mut buf = Vec::new();
        write_triplane(&tp, &mut buf).unwrap();
        prop_assert_eq!(read_triplane(buf.as_slice()).unwrap(), tp);
    }

    #[test]
    fn ray_params_round_trip(seed in any::<u64>(), k in 1usize..6, j in 1usize..4, along in any::<bool>(), per_channel in any::<bool>()) {
        let mut r = rng(seed);
        let cfg = RaySampleConfig { samples: k, near: 1.0, far: 2.0, heads: j };
        let mut p = RayAttentionParams::initial(&cfg, along);
        p.logits.iter_mut().for_each(|l| *l = r.random_range(-5.0..5.0));
        if per_channel {
            p.head_weights = HeadWeights::PerChannel { channels: 3, values: (0..3 * j).map(|_| r.random_range(-1.0..1.0)).collect() };
        }
        let mut buf = Vec::new();
        write_params(&p, &mut buf).unwrap();
        prop_assert_eq!(read_params(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn ray_weights_normalized(logits in proptest::collection::vec(-700.0..700.0f64, 12)) {
        let cfg = RaySampleConfig { samples: 4, near: 1.0, far: 2.0, heads: 3 };
        let mut p = RayAttentionParams::initial(&cfg, false);
        p.logits = logits;
        let a = p.attention_weights();
        for j in 0..3 {
            let s: f64 = (0..4).map(|k| a[k * 3 + j]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let f = FeatureGrid::from_fn(2, 3, 2, |_, _, _| r.random_range(-5.0..5.0));
        let lists = CandidateLists::from_rows((0..6).map(|q| (0..=q as u32).collect::<Vec<_>>()));
        let w = attention_weights(&f, &[&f], &lists, &AttentionParams::identity(2)).unwrap();
        for row in w {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
