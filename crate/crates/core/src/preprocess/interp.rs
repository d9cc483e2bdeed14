//! Cubic convolution sampling (Keys kernel, `a = -0.5`).

const A: f64 = -0.5;

pub fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Symmetric reflection: `... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...`.
pub fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

pub fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Samples a row-major `h × w` grid at fractional `(y, x)`. Integer positions
/// return the stored value exactly.
pub fn bicubic(src: &[f64], h: usize, w: usize, y: f64, x: f64, index: fn(isize, usize) -> usize) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    if fy == 0.0 && fx == 0.0 {
        return src[index(y0, h) * w + index(x0, w)];
    }
    let wy = [cubic_weight(1.0 + fy), cubic_weight(fy), cubic_weight(1.0 - fy), cubic_weight(2.0 - fy)];
    let wx = [cubic_weight(1.0 + fx), cubic_weight(fx), cubic_weight(1.0 - fx), cubic_weight(2.0 - fx)];
    let mut acc = 0.0;
    for (dy, wyv) in wy.iter().enumerate() {
        let row = index(y0 + dy as isize - 1, h) * w;
        let mut line = 0.0;
        for (dx, wxv) in wx.iter().enumerate() {
            line += wxv * src[row + index(x0 + dx as isize - 1, w)];
        }
        acc += wyv * line;
    }
    acc
}

/// Nearest-neighbour lookup with mirror extension.
pub fn nearest<T: Copy>(src: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let (r, c) = (y.round() as isize, x.round() as isize);
    src[mirror(r, h) * w + mirror(c, w)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_partition_of_unity() {
        for k in 0..=20 {
            let f = k as f64 / 20.0;
            let s = cubic_weight(1.0 + f) + cubic_weight(f) + cubic_weight(1.0 - f) + cubic_weight(2.0 - f);
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn mirror_indices() {
        let got: Vec<usize> = (-3..7).map(|i| mirror(i, 4)).collect();
        assert_eq!(got, [2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn reproduces_linear_functions_in_interior() {
        let (h, w) = (8, 8);
        let src: Vec<f64> = (0..h * w).map(|i| 0.3 * (i / w) as f64 - 0.7 * (i % w) as f64).collect();
        let v = bicubic(&src, h, w, 3.25, 4.6, mirror);
        assert!((v - (0.3 * 3.25 - 0.7 * 4.6)).abs() < 1e-12);
    }
}
