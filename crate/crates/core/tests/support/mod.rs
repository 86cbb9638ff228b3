//! Straight-line re-evaluations used as test oracles. Nothing here calls the
//! library's numeric kernels.
#![allow(dead_code)]

use cadrl::kg::{CategoryAssignment, EntityId, EntityKind, KgBuilder, KnowledgeGraph};
use cadrl::numcore::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mv(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(x.len(), cols);
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += w[r * cols + c] * x[c];
        }
        out[r] = acc;
    }
    out
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn had(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q.max(1e-12)).ln()).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(store.id(name).unwrap_or_else(|| panic!("no param {name}"))).data()
}

/// Random typed graph with `n_items` items, one user, a couple of brands and
/// features, and random item–item and item–attribute links. Every item gets
/// one or two of `n_cats` categories.
pub fn random_fixture(seed: u64, n_items: usize, n_cats: usize) -> (KnowledgeGraph, CategoryAssignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = KgBuilder::new();
    let u = b.add_entity("u0", EntityKind::User).unwrap();
    let items: Vec<EntityId> = (0..n_items).map(|k| b.add_entity(&format!("i{k}"), EntityKind::Item).unwrap()).collect();
    let brand = b.add_entity("b0", EntityKind::Brand).unwrap();
    let feature = b.add_entity("f0", EntityKind::Feature).unwrap();
    let rel = |b: &KgBuilder, n: &str| b.relation_id(n).unwrap();
    let item_rels = [rel(&b, "also_bought"), rel(&b, "also_viewed"), rel(&b, "bought_together")];
    b.add_triple_ids(u, rel(&b, "purchase"), items[0]).unwrap();
    b.add_triple_ids(u, rel(&b, "mention"), feature).unwrap();
    for &i in &items {
        if rng.gen_bool(0.5) {
            b.add_triple_ids(i, rel(&b, "produced_by"), brand).unwrap();
        }
        if rng.gen_bool(0.5) {
            b.add_triple_ids(i, rel(&b, "described_by"), feature).unwrap();
        }
        for _ in 0..2 {
            let j = items[rng.gen_range(0..n_items)];
            if j != i {
                b.add_triple_ids(i, item_rels[rng.gen_range(0..3)], j).unwrap();
            }
        }
    }
    let kg = b.build();
    let mut pairs = Vec::new();
    for (k, &i) in items.iter().enumerate() {
        pairs.push((i, format!("C{}", k % n_cats)));
        if rng.gen_bool(0.3) {
            pairs.push((i, format!("C{}", rng.gen_range(0..n_cats))));
        }
    }
    let a = CategoryAssignment::from_pairs(&kg, pairs).unwrap();
    (kg, a)
}

/// Representation of every entity recomputed with plain
/// loops, reading weights by name and neighbours straight from adjacency.
pub fn oracle_cggnn(
    store: &ParamStore,
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
    ent: &[Vec<f64>],
    rel: &[Vec<f64>],
    cats: &[Vec<f64>],
    layers: usize,
    cgan_layers: usize,
    delta: f64,
    slope: f64,
) -> Vec<Vec<f64>> {
    let d = ent[0].len();
    let items: Vec<EntityId> = kg.entities_of_kind(EntityKind::Item).collect();
    let hp = &rel[kg.purchase().0];
    let mut prev: Vec<Vec<f64>> = ent.to_vec();
    for k in 0..layers {
        let w = |n: &str| param(store, &format!("cggnn.layer{k}.{n}"));
        let mut next = prev.clone();
        for &i in &items {
            let hi = &prev[i.0];
            let mut msg_in = vec![0.0; d];
            let mut msg_out = vec![0.0; d];
            for e in kg.out_edges(i) {
                if kg.kind(e.target) == EntityKind::User {
                    continue;
                }
                let he = &prev[e.target.0];
                let hr = &rel[e.relation.0];
                let t: Vec<f64> = mv(w("w1"), d, 4 * d, &cat(&[hi, he, hr, hp])).into_iter().map(sig).collect();
                let alpha = sig(mv(w("w2"), 1, d, &t)[0] + w("b")[0]);
                let inverse = kg.relation(e.relation).is_inverse;
                let wm = if inverse { w("w_in") } else { w("w_out") };
                let m = scale(&mv(wm, d, d, &had(he, hr)), alpha);
                if inverse {
                    msg_in = add(&msg_in, &m);
                } else {
                    msg_out = add(&msg_out, &m);
                }
            }
            let n = add(&msg_in, &msg_out);
            next[i.0] = oracle_gated(store, k, &n, hi);
        }
        prev = next;
    }
    let h_tilde = prev;
    let mut cat_vecs: Vec<Vec<f64>> = cats.to_vec();
    let mut ctx: Vec<Vec<f64>> = vec![vec![0.0; d]; ent.len()];
    for m in 0..cgan_layers {
        let w_ic = param(store, &format!("cggnn.cgan{m}.w_ic"));
        for &i in &items {
            let nc: Vec<usize> = oracle_category_neighbors(kg, assignment, i);
            let beta: Vec<f64> = nc
                .iter()
                .map(|&c| {
                    let s = mv(w_ic, 1, 2 * d, &cat(&[&h_tilde[i.0], &cat_vecs[c]]))[0];
                    if s > 0.0 { s } else { slope * s }
                })
                .collect();
            let a = softmax(&beta);
            let mut acc = vec![0.0; d];
            for (x, &c) in nc.iter().enumerate() {
                acc = add(&acc, &scale(&cat_vecs[c], a[x]));
            }
            ctx[i.0] = acc;
        }
        if m + 1 < cgan_layers {
            for c in assignment.ids() {
                let members = assignment.members(c);
                let mut acc = vec![0.0; d];
                for e in members {
                    acc = add(&acc, &add(&h_tilde[e.0], &ctx[e.0]));
                }
                cat_vecs[c.0] = scale(&acc, 1.0 / members.len() as f64);
            }
        }
    }
    (0..ent.len())
        .map(|e| if kg.is_item(EntityId(e)) { add(&h_tilde[e], &scale(&ctx[e], delta)) } else { ent[e].clone() })
        .collect()
}

pub fn oracle_gated(store: &ParamStore, layer: usize, n: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let w = |name: &str| param(store, &format!("cggnn.layer{layer}.{name}"));
    let z: Vec<f64> = add(&mv(w("wz1"), d, d, n), &mv(w("wself"), d, d, h)).into_iter().map(sig).collect();
    let r: Vec<f64> = add(&mv(w("wv1"), d, d, n), &mv(w("wv2"), d, d, h)).into_iter().map(sig).collect();
    let v: Vec<f64> = add(&mv(w("wvh1"), d, d, n), &mv(w("wvh2"), d, d, &had(&r, h))).into_iter().map(f64::tanh).collect();
    (0..d).map(|k| (1.0 - z[k]) * h[k] + z[k] * v[k]).collect()
}

/// Own categories plus categories of one-hop item neighbours, by brute force
/// over every triple.
pub fn oracle_category_neighbors(kg: &KnowledgeGraph, assignment: &CategoryAssignment, item: EntityId) -> Vec<usize> {
    let mut out: Vec<usize> = assignment.categories_of(item).iter().map(|c| c.0).collect();
    for t in kg.triples() {
        if t.head == item && kg.is_item(t.tail) {
            out.extend(assignment.categories_of(t.tail).iter().map(|c| c.0));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// One LSTM step with gate blocks ordered input, forget, candidate, output.
pub fn oracle_lstm(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let w = param(store, &format!("{prefix}.weight"));
    let b = param(store, &format!("{prefix}.bias"));
    let pre = add(&mv(w, 4 * hd, x.len() + hd, &cat(&[x, h])), b);
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for k in 0..hd {
        let i = sig(pre[k]);
        let f = sig(pre[hd + k]);
        let g = pre[2 * hd + k].tanh();
        let o = sig(pre[3 * hd + k]);
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
