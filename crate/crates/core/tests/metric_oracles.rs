use mdm::metrics::{aji, connected_components, dice, iou, miou, Connectivity, InstanceMap};
use mdm::LabelMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Set-based oracles: pixel sets as sorted index vectors.

fn set(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

fn inter(a: &[usize], b: &[usize]) -> usize {
    a.iter().filter(|i| b.contains(i)).count()
}

fn union(a: &[usize], b: &[usize]) -> usize {
    a.len() + b.iter().filter(|i| !a.contains(i)).count()
}

fn dice_oracle(p: &[bool], g: &[bool]) -> f64 {
    let (p, g) = (set(p), set(g));
    if p.is_empty() && g.is_empty() {
        1.0
    } else {
        2.0 * inter(&p, &g) as f64 / (p.len() + g.len()) as f64
    }
}

fn iou_oracle(p: &[bool], g: &[bool]) -> f64 {
    let (p, g) = (set(p), set(g));
    if p.is_empty() && g.is_empty() {
        1.0
    } else {
        inter(&p, &g) as f64 / union(&p, &g) as f64
    }
}

fn miou_oracle(p: &LabelMap, g: &LabelMap, k: u32) -> f64 {
    let mut scores = Vec::new();
    for c in 0..k {
        let ps = set(&p.mask_of(c));
        let gs = set(&g.mask_of(c));
        if ps.is_empty() && gs.is_empty() {
            continue;
        }
        scores.push(inter(&ps, &gs) as f64 / union(&ps, &gs) as f64);
    }
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

fn instances(m: &InstanceMap) -> Vec<Vec<usize>> {
    (1..=m.count())
        .map(|id| (0..m.ids().len()).filter(|&i| m.ids()[i] == id).collect())
        .collect()
}

// Per-gt best match by explicit enumeration of every predicted instance.
fn aji_oracle(pred: &InstanceMap, gt: &InstanceMap) -> f64 {
    let ps = instances(pred);
    let gs = instances(gt);
    let mut used = vec![false; ps.len()];
    let (mut num, mut den) = (0usize, 0usize);
    for g in &gs {
        let mut best: Option<usize> = None;
        let mut best_score = 0.0;
        for (j, p) in ps.iter().enumerate() {
            let i = inter(g, p);
            if i == 0 {
                continue;
            }
            let s = i as f64 / union(g, p) as f64;
            if best.is_none() || s > best_score {
                best = Some(j);
                best_score = s;
            }
        }
        match best {
            Some(j) => {
                num += inter(g, &ps[j]);
                den += union(g, &ps[j]);
                used[j] = true;
            }
            None => den += g.len(),
        }
    }
    for (j, p) in ps.iter().enumerate() {
        if !used[j] {
            den += p.len();
        }
    }
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

// Recursive flood fill, independent of the BFS labeller.
fn flood_oracle(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    fn fill(mask: &[bool], ids: &mut [u32], h: usize, w: usize, y: usize, x: usize, id: u32) {
        let p = y * w + x;
        if !mask[p] || ids[p] != 0 {
            return;
        }
        ids[p] = id;
        if y > 0 {
            fill(mask, ids, h, w, y - 1, x, id);
        }
        if y + 1 < h {
            fill(mask, ids, h, w, y + 1, x, id);
        }
        if x > 0 {
            fill(mask, ids, h, w, y, x - 1, id);
        }
        if x + 1 < w {
            fill(mask, ids, h, w, y, x + 1, id);
        }
    }
    let mut ids = vec![0u32; h * w];
    let mut next = 0;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] && ids[y * w + x] == 0 {
                next += 1;
                fill(mask, &mut ids, h, w, y, x, next);
            }
        }
    }
    ids
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let density = rng.random_range(0.0..1.0);
    (0..n).map(|_| rng.random_bool(density)).collect()
}

/// Blobby masks: union of random rectangles, so components are larger than single pixels.
fn random_blobs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for _ in 0..rng.random_range(0..6) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (bh, bw) = (rng.random_range(1..6), rng.random_range(1..6));
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                m[y * w + x] = true;
            }
        }
    }
    m
}

#[test]
fn dice_iou_match_set_oracles_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = random_mask(&mut rng, 256);
        let g = random_mask(&mut rng, 256);
        assert_eq!(dice(&p, &g).unwrap(), dice_oracle(&p, &g));
        assert_eq!(iou(&p, &g).unwrap(), iou_oracle(&p, &g));
    }
}

#[test]
fn miou_matches_per_class_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..100 {
        let k = if case % 2 == 0 { 34 } else { rng.random_range(2..6) };
        let labels = |rng: &mut ChaCha8Rng| {
            let used = rng.random_range(1..=k);
            LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..used)).collect()).unwrap()
        };
        let p = labels(&mut rng);
        let g = labels(&mut rng);
        let got = miou(&p, &g, k as usize).unwrap();
        assert!((got - miou_oracle(&p, &g, k)).abs() < 1e-9);
    }
}

#[test]
fn components_match_flood_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let m = random_blobs(&mut rng, 16, 16);
        let cc = connected_components(&m, 16, 16, Connectivity::Four).unwrap();
        assert_eq!(cc.ids(), flood_oracle(&m, 16, 16).as_slice());
    }
}

#[test]
fn aji_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let p = connected_components(&random_blobs(&mut rng, 16, 16), 16, 16, Connectivity::Four).unwrap();
        let g = connected_components(&random_blobs(&mut rng, 16, 16), 16, 16, Connectivity::Four).unwrap();
        assert_eq!(aji(&p, &g).unwrap(), aji_oracle(&p, &g));
    }
}

#[test]
fn aji_two_by_two_toy() {
    // 8x8: gt has two squares; pred splits the first and misses the second
    let mut g = vec![0u32; 64];
    let mut p = vec![0u32; 64];
    for y in 0..3 {
        for x in 0..3 {
            g[y * 8 + x] = 1;
            g[(y + 4) * 8 + x + 4] = 2;
        }
    }
    for y in 0..3 {
        for x in 0..2 {
            p[y * 8 + x] = 1;
        }
        p[y * 8 + 3] = 2;
    }
    let g = InstanceMap::new(8, 8, g).unwrap();
    let p = InstanceMap::new(8, 8, p).unwrap();
    // gt1 -> pred1 (I 6, U 9); gt2 unmatched (+9); pred2 unused (+3)
    let expected = 6.0 / 21.0;
    assert!((aji(&p, &g).unwrap() - expected).abs() < 1e-15);
    assert_eq!(aji(&p, &g).unwrap(), aji_oracle(&p, &g));
}

fn pair() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn dice_iou_identity_and_symmetry((p, g) in pair()) {
        let d = dice(&p, &g).unwrap();
        let j = iou(&p, &g).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert_eq!(d, dice(&g, &p).unwrap());
        prop_assert_eq!(j, iou(&g, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
    }

    #[test]
    fn metrics_ignore_pixel_order((p, g) in pair(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..p.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<bool> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<bool> = perm.iter().map(|&i| g[i]).collect();
        prop_assert_eq!(dice(&p, &g).unwrap(), dice(&pp, &gp).unwrap());
        prop_assert_eq!(iou(&p, &g).unwrap(), iou(&pp, &gp).unwrap());
        let lp = LabelMap::new(1, p.len(), p.iter().map(|&b| b as u32).collect()).unwrap();
        let lg = LabelMap::new(1, g.len(), g.iter().map(|&b| b as u32).collect()).unwrap();
        let lpp = LabelMap::new(1, p.len(), pp.iter().map(|&b| b as u32).collect()).unwrap();
        let lgp = LabelMap::new(1, g.len(), gp.iter().map(|&b| b as u32).collect()).unwrap();
        prop_assert_eq!(miou(&lp, &lg, 2).unwrap(), miou(&lpp, &lgp, 2).unwrap());
    }

    #[test]
    fn aji_bounded_and_perfect_on_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = connected_components(&random_blobs(&mut rng, 12, 12), 12, 12, Connectivity::Four).unwrap();
        prop_assert_eq!(aji(&m, &m).unwrap(), 1.0);
        let o = connected_components(&random_blobs(&mut rng, 12, 12), 12, 12, Connectivity::Four).unwrap();
        let a = aji(&o, &m).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
