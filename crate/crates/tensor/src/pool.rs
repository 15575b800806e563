/// Half-open input range averaged into output cell `i` of `out` cells over `len` inputs.
pub fn adaptive_bounds(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Non-overlapping max pooling over `planes` independent `h × w` planes.
/// Returns pooled values and, per output, the flat input index that won
/// (first maximal element in row-major window order).
pub(crate) fn max_pool(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn adaptive_avg_pool(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bounds(j, w, ow);
                let mut s = 0.0;
                for r in r0..r1 {
                    s += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_pool_backward(
    g: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (r0, r1) = adaptive_bounds(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = adaptive_bounds(j, w, ow);
                let share = g[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in &mut plane[r * w + c0..r * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_downsize_and_upsize() {
        // 4 -> 2: quadrants
        assert_eq!(adaptive_bounds(0, 4, 2), (0, 2));
        assert_eq!(adaptive_bounds(1, 4, 2), (2, 4));
        // 2 -> 4: each input replicated into a pair of outputs
        let b: Vec<_> = (0..4).map(|i| adaptive_bounds(i, 2, 4)).collect();
        assert_eq!(b, vec![(0, 1), (0, 1), (1, 2), (1, 2)]);
        // 21 -> 64 never yields an empty bucket
        assert!((0..64).all(|i| {
            let (s, e) = adaptive_bounds(i, 21, 64);
            e > s && e <= 21
        }));
    }

    #[test]
    fn max_pool_first_tie_wins() {
        let (v, a) = max_pool(&[1.0, 1.0, 1.0, 1.0], 1, 2, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
