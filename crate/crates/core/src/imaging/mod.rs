//! Planes, stacks, the dihedral group of the square, and mirror padding.
//!
//! Probability maps use the direct convention everywhere: `p = 1` means
//! membrane. Only display code inverts it.

mod pgm;
mod probstack;
mod synth;

pub use pgm::{decode_pgm, encode_gray_pgm, encode_label_pgm, read_pgm, write_gray_pgm, write_label_pgm, PgmImage};
pub use probstack::{decode_probstack, encode_probstack, read_probstack, write_probstack};
pub use synth::{synth_plane, synth_stack, SynthConfig, SynthPlane};

use crate::error::{Error, Result};

/// A dense `height x width` plane in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Gray-level image with values in `[0, 1]`.
pub type GrayImage = Grid<f64>;
/// Per-pixel membrane probability in `[0, 1]`.
pub type ProbMap = Grid<f64>;
/// Segment ids; 0 marks membrane / boundary pixels.
pub type LabelMap = Grid<u32>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty plane {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} plane given {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("filled: empty plane")
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self::new(height, width, data).expect("from_fn: empty plane")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }
}

impl LabelMap {
    /// Binary membrane indicator: `true` where the label is 0.
    pub fn membrane_mask(&self) -> Grid<bool> {
        self.map(|&l| l == 0)
    }
}

/// An ordered, non-empty list of equally sized planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    planes: Vec<Grid<T>>,
}

impl<T: Copy> Stack<T> {
    pub fn new(planes: Vec<Grid<T>>) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::Shape("empty stack".into()))?;
        let dims = first.dims();
        if let Some((i, p)) = planes.iter().enumerate().find(|(_, p)| p.dims() != dims) {
            return Err(Error::Shape(format!(
                "plane {i} is {:?}, expected {dims:?}",
                p.dims()
            )));
        }
        Ok(Self { planes })
    }

    pub fn planes(&self) -> &[Grid<T>] {
        &self.planes
    }

    pub fn into_planes(self) -> Vec<Grid<T>> {
        self.planes
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.planes[0].dims()
    }
}

/// Applies element `k` of the dihedral group of order 8.
///
/// `k = 4 * f + r`: a horizontal flip (`col -> W-1-col`) when `f = 1`,
/// followed by `r` clockwise quarter turns, each mapping
/// `(row, col) -> (col, H-1-row)`.
pub fn d8_apply<T: Copy>(plane: &Grid<T>, k: usize) -> Result<Grid<T>> {
    if k >= 8 {
        return Err(Error::InvalidArgument(format!("d8 element {k} out of range 0..8")));
    }
    let mut cur = if k >= 4 { flip_horizontal(plane) } else { plane.clone() };
    for _ in 0..k % 4 {
        cur = rotate_cw(&cur);
    }
    Ok(cur)
}

/// The element undoing `k`. Flips are involutions after any rotation.
pub fn d8_inverse(k: usize) -> usize {
    let r = k % 4;
    if k >= 4 {
        k
    } else {
        (4 - r) % 4
    }
}

fn flip_horizontal<T: Copy>(p: &Grid<T>) -> Grid<T> {
    Grid::from_fn(p.height, p.width, |y, x| p.get(y, p.width - 1 - x))
}

fn rotate_cw<T: Copy>(p: &Grid<T>) -> Grid<T> {
    // Output pixel (r, c) came from input (H-1-c, r).
    let h = p.height;
    Grid::from_fn(p.width, p.height, |r, c| p.get(h - 1 - c, r))
}

/// Reflects index `i` (which may lie up to `n - 1` outside) into `0..n`
/// without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Mirror-pads a plane by `r` pixels on every side (`pad[-1] = x[1]`).
pub fn mirror_pad<T: Copy>(plane: &Grid<T>, r: usize) -> Result<Grid<T>> {
    let (h, w) = plane.dims();
    if r + 1 > h.min(w) {
        return Err(Error::InvalidArgument(format!(
            "padding {r} too large for a {h}x{w} plane"
        )));
    }
    let r = r as isize;
    Ok(Grid::from_fn(h + 2 * r as usize, w + 2 * r as usize, |y, x| {
        plane.get(reflect(y as isize - r, h), reflect(x as isize - r, w))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asym(h: usize, w: usize) -> Grid<f64> {
        Grid::from_fn(h, w, |y, x| (y * w + x) as f64)
    }

    #[test]
    fn quarter_turn_matches_pixel_map() {
        let p = Grid::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(d8_apply(&p, 0).unwrap(), p);
        assert_eq!(d8_apply(&p, 1).unwrap().data(), &[3, 1, 4, 2]);
        assert!(d8_apply(&p, 8).is_err());
    }

    #[test]
    fn odd_rotations_swap_dimensions() {
        let p = asym(3, 4);
        for k in 0..8 {
            let t = d8_apply(&p, k).unwrap();
            let expected = if k % 2 == 1 { (4, 3) } else { (3, 4) };
            assert_eq!(t.dims(), expected, "k={k}");
        }
    }

    #[test]
    fn inverse_table_exhaustive() {
        assert_eq!(d8_inverse(0), 0);
        assert_eq!(d8_inverse(1), 3);
        let p = asym(3, 4);
        for k in 0..8 {
            let kinv = d8_inverse(k);
            let back = d8_apply(&d8_apply(&p, k).unwrap(), kinv).unwrap();
            assert_eq!(back, p, "k={k} inverse {kinv}");
            // The inverse is unique.
            let others = (0..8)
                .filter(|&j| d8_apply(&d8_apply(&p, k).unwrap(), j).unwrap() == p)
                .count();
            assert_eq!(others, 1);
        }
    }

    #[test]
    fn eight_distinct_images_of_generic_plane() {
        let p = asym(4, 4);
        let images: Vec<_> = (0..8).map(|k| d8_apply(&p, k).unwrap()).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn mirror_pad_row() {
        let p = Grid::new(1, 3, vec!['a', 'b', 'c']).unwrap();
        // A 1-row plane cannot be padded vertically; pad a 3x3 and read a row.
        assert!(mirror_pad(&p, 1).is_err());
        let q = Grid::from_fn(3, 3, |_, x| ['a', 'b', 'c'][x]);
        let padded = mirror_pad(&q, 2).unwrap();
        let row: String = padded.row(2).iter().collect();
        assert_eq!(row, "cbabcba");
        assert_eq!(mirror_pad(&q, 0).unwrap(), q);
    }

    proptest! {
        #[test]
        fn d8_group_laws(h in 1usize..7, w in 1usize..7, seed in any::<u64>(), k in 0usize..8) {
            let p = Grid::from_fn(h, w, |y, x| crate::seed::derive(seed, &format!("{y},{x}")));
            let t = d8_apply(&p, k).unwrap();
            prop_assert_eq!(d8_apply(&t, d8_inverse(k)).unwrap(), p.clone());
            prop_assert_eq!(d8_apply(&d8_apply(&p, d8_inverse(k)).unwrap(), k).unwrap(), p);
        }

        #[test]
        fn mirror_pad_commutes_with_d8(h in 3usize..8, w in 3usize..8, r in 0usize..3, k in 0usize..8, seed in any::<u64>()) {
            let p = Grid::from_fn(h, w, |y, x| crate::seed::derive(seed, &format!("{y},{x}")));
            let a = mirror_pad(&d8_apply(&p, k).unwrap(), r).unwrap();
            let b = d8_apply(&mirror_pad(&p, r).unwrap(), k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mirror_pad_keeps_interior(h in 3usize..9, w in 3usize..9, r in 0usize..3) {
            let p = asym(h, w);
            let padded = mirror_pad(&p, r).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(padded.get(y + r, x + r), p.get(y, x));
                }
            }
        }
    }
}
