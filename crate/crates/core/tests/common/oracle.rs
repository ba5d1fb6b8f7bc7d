//! Step-by-step dense recomputation of the attention block and classifier
//! with nested `Vec` loops, independent of the tape and of ndarray products.

use kenet::params::ParamStore;
use kenet::tape::Matrix;

pub type Dense = Vec<Vec<f64>>;

pub fn dense(m: &Matrix) -> Dense {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn param(p: &ParamStore, name: &str) -> Dense {
    dense(p.value(name).unwrap())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul(a: &Dense, b: &Dense) -> Dense {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for (k, x) in row.iter().enumerate() {
                        s += x * b[k][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn softmax_masked(scores: &Dense, mask: &[bool]) -> Dense {
    scores
        .iter()
        .map(|row| {
            let mut max = f64::NEG_INFINITY;
            for (t, s) in row.iter().enumerate() {
                if mask[t] && *s > max {
                    max = *s;
                }
            }
            let mut e = vec![0.0; row.len()];
            let mut total = 0.0;
            for t in 0..row.len() {
                if mask[t] {
                    e[t] = (row[t] - max).exp();
                    total += e[t];
                }
            }
            e.iter().map(|v| v / total).collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleTrace {
    pub a_doc: Dense,
    pub a_know: Option<Dense>,
    pub lambda_doc: Vec<f64>,
    pub lambda_know: Option<Vec<f64>>,
    pub al_doc: Dense,
    pub al_know: Option<Dense>,
    pub label_repr: Dense,
    pub lambda_label: Vec<f64>,
    pub lambda: Vec<f64>,
    pub s: Dense,
}

struct Branch {
    a: Dense,
    lambda: Vec<f64>,
    al: Dense,
    lpool: Dense,
}

fn branch(p: &ParamStore, name: &str, labels: &Dense, en: &Dense, mask: &[bool], label_softmax: bool) -> Branch {
    let w = param(p, &format!("fusion.{name}.w"));
    let w_att = param(p, &format!("fusion.{name}.w_att"));
    let w_gate = param(p, &format!("fusion.{name}.w_gate"));
    let w_label = param(p, &format!("fusion.label_{name}.w_label"));
    let w_seq = param(p, &format!("fusion.label_{name}.w_seq"));
    let l = en.len();
    let m = labels.len();
    // hidden[t][a] = tanh(sum_c en[t][c] w[c][a])
    let hidden: Dense = matmul(en, &w).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
    let mut scores = vec![vec![0.0; l]; m];
    for i in 0..m {
        for t in 0..l {
            for a in 0..w_att[0].len() {
                scores[i][t] += w_att[i][a] * hidden[t][a];
            }
        }
    }
    let a = softmax_masked(&scores, mask);
    let pooled = matmul(&a, en);
    let lambda: Vec<f64> = pooled
        .iter()
        .map(|row| sigmoid(row.iter().zip(&w_gate).map(|(x, g)| x * g[0]).sum()))
        .collect();
    let pl = matmul(labels, &w_label);
    let ps = matmul(en, &w_seq);
    let mut al = vec![vec![0.0; l]; m];
    for i in 0..m {
        for t in 0..l {
            if mask[t] {
                al[i][t] = pl[i].iter().zip(&ps[t]).map(|(x, y)| x * y).sum();
            }
        }
    }
    if label_softmax {
        al = softmax_masked(&al, mask);
    }
    let lpool = matmul(&al, en);
    Branch { a, lambda, al, lpool }
}

pub fn attention(
    p: &ParamStore,
    beta: (f64, f64),
    label_softmax: bool,
    labels: &Dense,
    doc: (&Dense, &[bool]),
    know: Option<(&Dense, &[bool])>,
) -> OracleTrace {
    let d = branch(p, "doc", labels, doc.0, doc.1, label_softmax);
    let k = know.map(|(en, mask)| branch(p, "know", labels, en, mask, label_softmax));
    let label_repr: Dense = match &k {
        Some(k) => d
            .lpool
            .iter()
            .zip(&k.lpool)
            .map(|(x, y)| x.iter().zip(y).map(|(a, b)| beta.0 * a + beta.1 * b).collect())
            .collect(),
        None => d.lpool.clone(),
    };
    let w_lg = param(p, "fusion.w_label_gate");
    let lambda_label: Vec<f64> = label_repr
        .iter()
        .map(|r| sigmoid(r.iter().zip(&w_lg).map(|(x, g)| x * g[0]).sum()))
        .collect();
    let lambda: Vec<f64> = (0..labels.len())
        .map(|i| {
            let l = lambda_label[i];
            let mut v = l / (l + d.lambda[i]);
            if let Some(k) = &k {
                v += l / (l + k.lambda[i]);
            }
            v
        })
        .collect();
    let s = label_repr
        .iter()
        .zip(&lambda)
        .map(|(r, w)| r.iter().map(|x| w * x).collect())
        .collect();
    OracleTrace {
        a_doc: d.a,
        a_know: k.as_ref().map(|k| k.a.clone()),
        lambda_doc: d.lambda,
        lambda_know: k.as_ref().map(|k| k.lambda.clone()),
        al_doc: d.al,
        al_know: k.as_ref().map(|k| k.al.clone()),
        label_repr,
        lambda_label,
        lambda,
        s,
    }
}

pub fn head(p: &ParamStore, s: &Dense) -> Vec<f64> {
    let w = param(p, "head.w");
    let w_out = param(p, "head.w_out");
    s.iter()
        .map(|row| {
            let mut z = 0.0;
            for j in 0..w[0].len() {
                let mut h = 0.0;
                for (c, x) in row.iter().enumerate() {
                    h += x * w[c][j];
                }
                z += h.tanh() * w_out[j][0];
            }
            sigmoid(z)
        })
        .collect()
}

pub fn bce(probs: &[f64], target: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(target) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / probs.len() as f64
}

pub fn max_abs_diff(a: &Dense, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a.first().map_or(0, Vec::len)), b.dim(), "shape");
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            worst = worst.max((x - b[[i, j]]).abs());
        }
    }
    worst
}

pub fn max_abs_diff_vec(a: &[f64], b: &Matrix) -> f64 {
    assert_eq!(b.dim(), (a.len(), 1), "shape");
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
