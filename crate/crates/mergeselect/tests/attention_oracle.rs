//! Equivalence, causality, and degeneration checks for the sparse attention
//! path against straight-line reference implementations.

use mergeselect::attention::{
    dense_causal_oracle, flop_account, iota_ids, ms_attention, MsConfig, ReprMode,
};
use mergeselect::positional::PosEncoding;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0f32..1.0))
}

/// topk covering every admissible region plus the local, so selection drops
/// nothing and the sparse path must reproduce dense attention.
fn exhaustive(s: usize, merges: usize, n: usize, permute: bool) -> MsConfig {
    let regions = n.div_ceil(s);
    MsConfig {
        s_q: s,
        s_k: s,
        topk: regions,
        merges,
        topn: regions,
        force_local: true,
        permute,
        perm_base: 5,
        perm_width: regions.min(10),
        repr_mode: ReprMode::Mean,
    }
}

fn max_abs_diff(a: &Array4<f32>, b: &Array4<f32>) -> f32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn exhaustive_selection_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = [
        (1, 1, 1, 16, 8, false),
        (1, 2, 4, 64, 16, false),
        (2, 2, 8, 96, 16, true),
        (2, 4, 16, 256, 32, false),
        (1, 3, 8, 250, 24, true),
    ];
    for (b, h, s, n, d, permute) in cases {
        for merges in [1usize, 2] {
            let cfg = exhaustive(s, merges, n, permute);
            let enc = PosEncoding::rope(d);
            let q = randn(&mut rng, (b, h, n, d));
            let k = randn(&mut rng, (b, h, n, d));
            let v = randn(&mut rng, (b, h, n, d));
            let ids = iota_ids(b, n);
            let sparse = ms_attention(&q, &k, &v, &ids, &cfg, &enc).unwrap();
            let dense = dense_causal_oracle(&q, &k, &v, &ids, &enc).unwrap();
            let err = max_abs_diff(&sparse.out, &dense);
            assert!(
                err < 1e-5,
                "b={b} h={h} s={s} n={n} merges={merges} permute={permute}: {err}"
            );
        }
    }
}

#[test]
fn sq_ne_sk_exhaustive_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, h, n, d) = (1, 2, 64, 16);
    let cfg = MsConfig {
        s_q: 8,
        s_k: 4,
        topk: 16,
        merges: 1,
        topn: 16,
        force_local: true,
        permute: true,
        perm_base: 5,
        perm_width: 10,
        repr_mode: ReprMode::Mean,
    };
    let q = randn(&mut rng, (b, h, n, d));
    let k = randn(&mut rng, (b, h, n, d));
    let v = randn(&mut rng, (b, h, n, d));
    let ids = iota_ids(b, n);
    let sparse = ms_attention(&q, &k, &v, &ids, &cfg, &PosEncoding::rope(d)).unwrap();
    let dense = dense_causal_oracle(&q, &k, &v, &ids, &PosEncoding::rope(d)).unwrap();
    assert!(max_abs_diff(&sparse.out, &dense) < 1e-5);
}

#[test]
fn prefix_outputs_unchanged_by_future_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (b, h, n, d) = (1, 2, 256, 16);
    let cfg = MsConfig {
        s_q: 8,
        s_k: 8,
        topk: 4,
        merges: 2,
        topn: 6,
        force_local: true,
        permute: false,
        perm_base: 5,
        perm_width: 4,
        repr_mode: ReprMode::Mean,
    };
    let enc = PosEncoding::rope(d);
    let ids = iota_ids(b, n);
    let q = randn(&mut rng, (b, h, n, d));
    let k = randn(&mut rng, (b, h, n, d));
    let v = randn(&mut rng, (b, h, n, d));
    let base = ms_attention(&q, &k, &v, &ids, &cfg, &enc).unwrap().out;
    for &t in &[17usize, 128, 255] {
        let (mut q2, mut k2, mut v2) = (q.clone(), k.clone(), v.clone());
        for c in 0..d {
            q2[[0, 0, t, c]] += 0.5;
            k2[[0, 1, t, c]] -= 0.7;
            v2[[0, 0, t, c]] += 0.25;
        }
        let got = ms_attention(&q2, &k2, &v2, &ids, &cfg, &enc).unwrap().out;
        for hi in 0..h {
            for p in 0..t {
                for c in 0..d {
                    assert_eq!(
                        base[[0, hi, p, c]],
                        got[[0, hi, p, c]],
                        "row {p} changed after perturbing token {t}"
                    );
                }
            }
        }
    }
}

#[test]
fn biformer_routing_reference() {
    // merges = 1, congruent regions, mean representatives: the pipeline is
    // plain region routing. Reference computed as an independent per-region
    // loop with no padding machinery.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (n, d, s, topk) = (64usize, 8usize, 8usize, 3usize);
    let cfg = MsConfig {
        s_q: s,
        s_k: s,
        topk,
        merges: 1,
        topn: topk,
        force_local: true,
        permute: false,
        perm_base: 5,
        perm_width: 3,
        repr_mode: ReprMode::Mean,
    };
    let enc = PosEncoding::rope(d);
    let q = randn(&mut rng, (1, 1, n, d));
    let k = randn(&mut rng, (1, 1, n, d));
    let v = randn(&mut rng, (1, 1, n, d));
    let ids = iota_ids(1, n);
    let got = ms_attention(&q, &k, &v, &ids, &cfg, &enc).unwrap().out;

    let regions = n / s;
    let mean = |x: &Array4<f32>, r: usize| -> Vec<f32> {
        (0..d)
            .map(|c| (0..s).map(|o| x[[0, 0, r * s + o, c]]).sum::<f32>() / s as f32)
            .collect()
    };
    let enc_theta = enc.theta().unwrap();
    let rot = |row: &mut Vec<f32>, m: usize| {
        for (i, &th) in enc_theta.iter().enumerate() {
            let (sn, cs) = (m as f64 * th).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cs as f32 + b * sn as f32;
            row[2 * i + 1] = b * cs as f32 - a * sn as f32;
        }
    };
    for r in 0..regions {
        let qm = mean(&q, r);
        let mut scored: Vec<(f32, usize)> = (0..r)
            .map(|j| {
                let km = mean(&k, j);
                (qm.iter().zip(&km).map(|(a, b)| a * b).sum::<f32>(), j)
            })
            .collect();
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        let mut picked: Vec<usize> = scored.iter().take(topk - 1).map(|p| p.1).collect();
        picked.push(r);
        let kv_tokens: Vec<usize> = picked
            .iter()
            .flat_map(|&j| (j * s..(j + 1) * s).collect::<Vec<_>>())
            .collect();
        for t in r * s..(r + 1) * s {
            let mut qt: Vec<f32> = (0..d).map(|c| q[[0, 0, t, c]]).collect();
            rot(&mut qt, t);
            let mut logits = Vec::new();
            let mut vals = Vec::new();
            for &tk in &kv_tokens {
                if tk > t {
                    continue;
                }
                let mut kt: Vec<f32> = (0..d).map(|c| k[[0, 0, tk, c]]).collect();
                rot(&mut kt, tk);
                logits.push(
                    qt.iter().zip(&kt).map(|(a, b)| a * b).sum::<f32>()
                        / (d as f32).sqrt(),
                );
                vals.push(tk);
            }
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..d {
                let want: f32 = logits
                    .iter()
                    .zip(&vals)
                    .map(|(l, &tk)| (l - max).exp() / z * v[[0, 0, tk, c]])
                    .sum();
                assert!(
                    (got[[0, 0, t, c]] - want).abs() < 1e-5,
                    "t={t} c={c}: {} vs {}",
                    got[[0, 0, t, c]],
                    want
                );
            }
        }
    }
}

#[test]
fn swin_local_window_reference() {
    // topn = merges with force_local retains locals only: each token
    // attends causally within its group's window.
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (n, d, s, merges) = (96usize, 8usize, 8usize, 2usize);
    let cfg = MsConfig {
        s_q: s,
        s_k: s,
        topk: 4,
        merges,
        topn: merges,
        force_local: true,
        permute: false,
        perm_base: 5,
        perm_width: 4,
        repr_mode: ReprMode::Mean,
    };
    let enc = PosEncoding::rope(d);
    let q = randn(&mut rng, (1, 1, n, d));
    let k = randn(&mut rng, (1, 1, n, d));
    let v = randn(&mut rng, (1, 1, n, d));
    let ids = iota_ids(1, n);
    let got = ms_attention(&q, &k, &v, &ids, &cfg, &enc).unwrap().out;

    let theta = enc.theta().unwrap();
    let rot = |x: &Array4<f32>, t: usize| -> Vec<f32> {
        let mut row: Vec<f32> = (0..d).map(|c| x[[0, 0, t, c]]).collect();
        for (i, &th) in theta.iter().enumerate() {
            let (sn, cs) = (t as f64 * th).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cs as f32 + b * sn as f32;
            row[2 * i + 1] = b * cs as f32 - a * sn as f32;
        }
        row
    };
    let window = s * merges;
    for t in 0..n {
        let w_start = (t / window) * window;
        let qt = rot(&q, t);
        let logits: Vec<f32> = (w_start..=t)
            .map(|j| {
                let kj = rot(&k, j);
                qt.iter().zip(&kj).map(|(a, b)| a * b).sum::<f32>() / (d as f32).sqrt()
            })
            .collect();
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f32 = logits.iter().map(|l| (l - max).exp()).sum();
        for c in 0..d {
            let want: f32 = logits
                .iter()
                .enumerate()
                .map(|(off, l)| (l - max).exp() / z * v[[0, 0, w_start + off, c]])
                .sum();
            assert!(
                (got[[0, 0, t, c]] - want).abs() < 1e-5,
                "t={t}: {} vs {}",
                got[[0, 0, t, c]],
                want
            );
        }
    }
}

#[test]
fn permute_equals_identity_grouping_when_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (b, h, n, d, s) = (1, 2, 128, 16, 8);
    let q = randn(&mut rng, (b, h, n, d));
    let k = randn(&mut rng, (b, h, n, d));
    let v = randn(&mut rng, (b, h, n, d));
    let ids = iota_ids(b, n);
    let enc = PosEncoding::rope(d);
    // merges = 1: identical per-region arithmetic, bitwise equal.
    let on = ms_attention(&q, &k, &v, &ids, &exhaustive(s, 1, n, true), &enc).unwrap();
    let off = ms_attention(&q, &k, &v, &ids, &exhaustive(s, 1, n, false), &enc).unwrap();
    assert_eq!(on.out, off.out);
    // merges = 2: same attended sets per token, fp32 order differs.
    let on = ms_attention(&q, &k, &v, &ids, &exhaustive(s, 2, n, true), &enc).unwrap();
    let off = ms_attention(&q, &k, &v, &ids, &exhaustive(s, 2, n, false), &enc).unwrap();
    assert!(max_abs_diff(&on.out, &off.out) < 1e-5);
}

#[test]
fn instrumented_counts_equal_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, h, n, d) = (1, 1, 256, 16);
    let cfg = MsConfig {
        s_q: 16,
        s_k: 16,
        topk: 8,
        merges: 4,
        topn: 8,
        force_local: true,
        permute: false,
        perm_base: 5,
        perm_width: 8,
        repr_mode: ReprMode::Mean,
    };
    let q = randn(&mut rng, (b, h, n, d));
    let k = randn(&mut rng, (b, h, n, d));
    let v = randn(&mut rng, (b, h, n, d));
    let out = ms_attention(&q, &k, &v, &iota_ids(b, n), &cfg, &PosEncoding::rope(d))
        .unwrap();
    let account = flop_account(n, d, &cfg).unwrap();
    assert_eq!(out.stats.selection_mas, account.selection_mas);
    assert_eq!(out.stats.attention_mas, account.attention_mas);
    assert_eq!(out.stats.gathered_elems, account.gathered_elems);
}

#[test]
fn token_without_keys_is_an_error() {
    let (b, h, n, d) = (1, 1, 16, 4);
    let cfg = MsConfig {
        s_q: 4,
        s_k: 4,
        topk: 2,
        merges: 1,
        topn: 2,
        force_local: false,
        permute: false,
        perm_base: 5,
        perm_width: 2,
        repr_mode: ReprMode::Mean,
    };
    let q = Array4::from_elem((b, h, n, d), 0.5f32);
    let err = ms_attention(&q, &q, &q, &iota_ids(b, n), &cfg, &PosEncoding::rope(d));
    assert!(err.is_err());
}
