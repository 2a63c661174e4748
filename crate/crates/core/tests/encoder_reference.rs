//! The encoder forward pass against a plain-loop reimplementation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protodx::encoder::{encode, EncoderConfig, EncoderParams};

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * gain[j] + bias[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference(tokens: &[u32], p: &EncoderParams<f64>, cfg: &EncoderConfig) -> Mat {
    let e = cfg.embed_dim;
    let dh = e / cfg.heads;
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..e)
                .map(|j| {
                    let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / e as f64);
                    let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                    p.token_embedding[[t as usize, j]] + pe
                })
                .collect()
        })
        .collect();
    let n = x.len();
    for b in &p.blocks {
        let h = layer_norm(&x, b.ln1_gain.as_slice().unwrap(), b.ln1_bias.as_slice().unwrap());
        let q = matmul(&h, &to_mat(&b.query));
        let k = matmul(&h, &to_mat(&b.key));
        let v = matmul(&h, &to_mat(&b.value));
        let mut concat = vec![vec![0.0; e]; n];
        for head in 0..cfg.heads {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let total: f64 = logits.iter().map(|z| z.exp()).sum();
                for j in 0..n {
                    let w = logits[j].exp() / total;
                    for c in cols.clone() {
                        concat[i][c] += w * v[j][c];
                    }
                }
            }
        }
        let attn = matmul(&concat, &to_mat(&b.output));
        for i in 0..n {
            for j in 0..e {
                x[i][j] += attn[i][j];
            }
        }
        let h = layer_norm(&x, b.ln2_gain.as_slice().unwrap(), b.ln2_bias.as_slice().unwrap());
        let mut hidden = matmul(&h, &to_mat(&b.ff1_weight));
        for row in &mut hidden {
            for (j, v) in row.iter_mut().enumerate() {
                *v = gelu(*v + b.ff1_bias[j]);
            }
        }
        let ff = matmul(&hidden, &to_mat(&b.ff2_weight));
        for i in 0..n {
            for j in 0..e {
                x[i][j] += ff[i][j] + b.ff2_bias[j];
            }
        }
    }
    let mut g = matmul(&x, &to_mat(&p.reduce_weight));
    for row in &mut g {
        for (j, v) in row.iter_mut().enumerate() {
            *v += p.reduce_bias[j];
        }
    }
    g
}

#[test]
fn forward_matches_plain_loops() {
    for (blocks, tokens) in [(1, vec![3u32, 7]), (2, vec![5, 1, 8, 8, 2]), (2, vec![4])] {
        let cfg = EncoderConfig {
            vocab_size: 10,
            embed_dim: 12,
            blocks,
            heads: 3,
            ff_dim: 20,
            output_dim: 6,
            max_len: 16,
        };
        let params = EncoderParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(blocks as u64));
        let got = encode(&tokens, &params, &cfg).unwrap().g;
        let want = reference(&tokens, &params, &cfg);
        for (i, row) in want.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                assert!((got[[i, j]] - w).abs() < 1e-10, "blocks {blocks} [{i},{j}]: {} vs {w}", got[[i, j]]);
            }
        }
    }
}
