use crate::boxlabels::BoxAnnotation;

/// Box around the largest 8-connected component of pixels strictly above `threshold`.
///
/// Components are discovered in raster order, so on equal sizes the one holding
/// the smallest `(row, col)` pixel wins. Returns `None` when no pixel passes.
pub fn mask_to_box(probs: &[f32], side: usize, threshold: f32) -> Option<BoxAnnotation> {
    assert_eq!(probs.len(), side * side, "mask_to_box expects a square map");
    let on: Vec<bool> = probs.iter().map(|&p| p > threshold).collect();
    let mut seen = vec![false; on.len()];
    let mut stack = Vec::new();
    let mut best: Option<(usize, [usize; 4])> = None;
    for start in 0..on.len() {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut count = 0;
        // [min row, max row, min col, max col]
        let mut ext = [usize::MAX, 0, usize::MAX, 0];
        while let Some(i) = stack.pop() {
            count += 1;
            let (r, c) = (i / side, i % side);
            ext = [ext[0].min(r), ext[1].max(r), ext[2].min(c), ext[3].max(c)];
            for nr in r.saturating_sub(1)..=(r + 1).min(side - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(side - 1) {
                    let j = nr * side + nc;
                    if on[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if best.is_none_or(|(n, _)| count > n) {
            best = Some((count, ext));
        }
    }
    best.map(|(_, [r0, r1, c0, c1])| {
        BoxAnnotation::new(c0 as f64, r0 as f64, (c1 - c0 + 1) as f64, (r1 - r0 + 1) as f64)
    })
}

/// Intersection over union; a missing box scores 0.
pub fn iou(a: Option<&BoxAnnotation>, b: Option<&BoxAnnotation>) -> f64 {
    let (Some(a), Some(b)) = (a, b) else { return 0.0 };
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}
