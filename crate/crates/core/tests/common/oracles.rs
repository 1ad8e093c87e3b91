//! Brute-force reference implementations used by the acceptance and property tests.

use std::collections::VecDeque;

use hsiseg::tiling::TileMap;

/// Per-class (recall, f1, iou) by counting expanded (truth, pred) pairs one at a time.
/// `None` for classes absent from both truth and prediction.
pub fn class_metrics_by_counting(rows: &[Vec<u64>]) -> Vec<Option<(f64, f64, f64)>> {
    let c = rows.len();
    let mut pairs = Vec::new();
    for (t, row) in rows.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                pairs.push((t, p));
            }
        }
    }
    (0..c)
        .map(|k| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for &(t, p) in &pairs {
                match (t == k, p == k) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fp + fn_ == 0 {
                return None;
            }
            let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            Some((div(tp, tp + fn_), div(2 * tp, 2 * tp + fp + fn_), div(tp, tp + fp + fn_)))
        })
        .collect()
}

/// O(n^2) pair count: (#pos > neg + #ties / 2) / (#pos * #neg).
pub fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 2;
            if si > sj {
                num += 2;
            } else if si == sj {
                num += 1;
            }
        }
    }
    num as f64 / den as f64
}

/// Whether every tile of `map` is one 4-connected component (BFS from its first pixel).
pub fn tiles_are_4_connected(map: &TileMap) -> bool {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    for tile in &map.tiles {
        let Some(&start) = tile.pixels.first() else {
            return false;
        };
        let id = map.assignment[start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut reached = 1;
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if !seen[q] && map.assignment[q] == id {
                    seen[q] = true;
                    reached += 1;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if reached != tile.pixels.len() {
            return false;
        }
    }
    true
}

/// Whether the tiles partition the image: every pixel in exactly one tile, and the
/// pixel lists agree with the assignment raster.
pub fn is_full_partition(map: &TileMap) -> bool {
    let mut count = vec![0u32; map.width * map.height];
    for (i, tile) in map.tiles.iter().enumerate() {
        for &p in &tile.pixels {
            if map.assignment[p] as usize != i {
                return false;
            }
            count[p] += 1;
        }
    }
    count.iter().all(|&c| c == 1)
}
