use std::f64::consts::PI;

use ndarray::Array2;

/// Width after embedding `m` features with `L = levels`: `m (2L + 3)`.
pub fn embedded_width(m: usize, levels: usize) -> usize {
    m * (2 * levels + 3)
}

/// Lifts each feature `x` to `(x, sin(2⁰πx), cos(2⁰πx), ..., sin(2ᴸπx),
/// cos(2ᴸπx))`, keeping each feature's block contiguous.
pub fn positional_embed(x: &Array2<f64>, levels: usize) -> Array2<f64> {
    let per = 2 * levels + 3;
    Array2::from_shape_fn((x.nrows(), x.ncols() * per), |(i, c)| {
        let (j, k) = (c / per, c % per);
        let v = x[[i, j]];
        if k == 0 {
            return v;
        }
        let freq = (1u64 << ((k - 1) / 2)) as f64 * PI;
        if k % 2 == 1 {
            (freq * v).sin()
        } else {
            (freq * v).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_input_level_zero() {
        assert_eq!(positional_embed(&array![[0.0]], 0), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn width_and_parity() {
        assert_eq!(embedded_width(2, 3), 18);
        let e = positional_embed(&array![[0.3, -1.2]], 3);
        assert_eq!(e.ncols(), 18);
        let n = positional_embed(&array![[-0.3, 1.2]], 3);
        for c in 0..18 {
            match c % 9 {
                0 => assert_eq!(e[[0, c]], -n[[0, c]]),
                k if k % 2 == 1 => assert!((e[[0, c]] + n[[0, c]]).abs() < 1e-15),
                _ => assert!((e[[0, c]] - n[[0, c]]).abs() < 1e-15),
            }
        }
        assert!((e[[0, 7]] - (8.0 * PI * 0.3).sin()).abs() < 1e-12);
    }
}
