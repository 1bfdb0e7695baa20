//! Dense multi-dimensional arrays.
//!
//! Rank 1–4, contiguous row-major storage. Rank-4 tensors use the
//! [batch, channel, height, width] dimension order; rank-3 image planes are
//! [channel, height, width]. Tensors are immutable through the public API
//! except for the explicit in-place mutators used by the optimizer, so
//! sharing them read-only across threads is safe.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::Shape(format!("rank must be 1..=4, got {}", shape.len())));
    }
    let mut n: usize = 1;
    for (axis, &e) in shape.iter().enumerate() {
        if e == 0 {
            return Err(Error::Shape(format!("axis {axis} has zero extent")));
        }
        n = n.checked_mul(e).ok_or_else(|| Error::Shape("extent product overflows".into()))?;
    }
    Ok(n)
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![T::ZERO; n] })
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Uniform draws in [lo, hi), consumed from `rng` in row-major order.
    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Self> {
        if lo >= hi {
            return Err(Error::Arg(format!("uniform needs lo < hi, got [{lo}, {hi})")));
        }
        let n = check_shape(shape)?;
        let data = (0..n).map(|_| T::from_f64(rng.uniform(lo, hi))).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access for the optimizer; single-writer by construction.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn zip_check(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "mul")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, s: T) -> Self {
        let data = self.data.iter().map(|&a| a * s).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|&x| x.to_f64()).sum())
    }

    pub fn mean(&self) -> T {
        T::from_f64(self.sum().to_f64() / self.len() as f64)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(self.data[0], |m, x| m.max(x))
    }

    /// Copy the window `[top..top+h, left..left+w]` from every channel of a
    /// rank-3 [C, H, W] tensor.
    pub fn crop2d(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if self.rank() != 3 {
            return Err(Error::Shape(format!("crop2d needs rank 3, got {}", self.rank())));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("crop extents must be >= 1".into()));
        }
        let (c, ih, iw) = (self.shape[0], self.shape[1], self.shape[2]);
        if top + h > ih || left + w > iw {
            return Err(Error::Bounds(format!(
                "window {top}+{h} x {left}+{w} exceeds plane {ih}x{iw}"
            )));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            let plane = ch * ih * iw;
            for row in top..top + h {
                let start = plane + row * iw + left;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Tensor { shape: vec![c, h, w], data })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::Tensor;
    use crate::error::Error;
    use crate::rng::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn zeros_shapes() {
        let t = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::<f64>::zeros(&[1]).unwrap();
        assert_eq!(t.data(), &[0.0]);
        let t = Tensor::<f64>::zeros(&[2, 3, 4, 5]).unwrap();
        assert_eq!(t.len(), 120);
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::<f64>::zeros(&[0]).is_err());
        assert!(Tensor::<f64>::zeros(&[2, 0, 3]).is_err());
        assert!(Tensor::<f64>::zeros(&[]).is_err());
        assert!(Tensor::<f64>::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let c = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.scale(0.0).data(), &[0.0, 0.0, 0.0]);
        let d = Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        let e = Tensor::from_vec(&[2], vec![4.0, 5.0]).unwrap();
        assert_eq!(d.mul(&e).unwrap().data(), &[8.0, 15.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2]).unwrap();
        let b = Tensor::<f64>::zeros(&[3]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn reductions() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.sum(), 6.0);
        let t = Tensor::from_vec(&[2], vec![2.0, 4.0]).unwrap();
        assert_eq!(t.mean(), 3.0);
        let t = Tensor::from_vec(&[2], vec![-1.0, -5.0]).unwrap();
        assert_eq!(t.max(), -1.0);
    }

    #[test]
    fn crop_center_of_ramp() {
        let ramp: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let t = Tensor::from_vec(&[1, 4, 4], ramp).unwrap();
        let c = t.crop2d(1, 1, 2, 2).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn crop_identity_and_max_offset() {
        let t = Tensor::<f64>::uniform(&mut Rng::new(1), &[3, 16, 16], 0.0, 1.0).unwrap();
        let c = t.crop2d(0, 0, 16, 16).unwrap();
        assert_eq!(c, t);

        // 256 - 227 = 29 is the maximal valid offset for a 227 window.
        let big = Tensor::<f64>::zeros(&[3, 256, 256]).unwrap();
        let c = big.crop2d(29, 29, 227, 227).unwrap();
        assert_eq!(c.shape(), &[3, 227, 227]);
        assert!(big.crop2d(30, 29, 227, 227).is_err());
    }

    #[test]
    fn uniform_determinism_and_lln() {
        let a = Tensor::<f64>::uniform(&mut Rng::new(42), &[4, 4], -1.0, 1.0).unwrap();
        let b = Tensor::<f64>::uniform(&mut Rng::new(42), &[4, 4], -1.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(Tensor::<f64>::uniform(&mut Rng::new(1), &[2], 1.0, 1.0).is_err());

        let big = Tensor::<f64>::uniform(&mut Rng::new(5), &[100_000], 0.0, 1.0).unwrap();
        assert!((big.mean() - 0.5).abs() < 0.01);
        assert!(big.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    proptest! {
        // Window of a window equals the direct window.
        #[test]
        fn crop_composes(
            top1 in 0usize..4, left1 in 0usize..4,
            top2 in 0usize..3, left2 in 0usize..3,
        ) {
            let data: Vec<f64> = (0..2 * 12 * 12).map(|i| i as f64).collect();
            let t = Tensor::from_vec(&[2, 12, 12], data).unwrap();
            let outer = t.crop2d(top1, left1, 8, 8).unwrap();
            let inner = outer.crop2d(top2, left2, 4, 4).unwrap();
            let direct = t.crop2d(top1 + top2, left1 + left2, 4, 4).unwrap();
            prop_assert_eq!(inner, direct);
        }

        // Commutativity is exact; associativity holds to 1 ulp per element.
        #[test]
        fn add_commutes_and_associates(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let a = Tensor::<f64>::uniform(&mut rng, &[257], -10.0, 10.0).unwrap();
            let b = Tensor::<f64>::uniform(&mut rng, &[257], -10.0, 10.0).unwrap();
            let c = Tensor::<f64>::uniform(&mut rng, &[257], -10.0, 10.0).unwrap();
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            let left = a.add(&b).unwrap().add(&c).unwrap();
            let right = a.add(&b.add(&c).unwrap()).unwrap();
            for (i, (l, r)) in left.iter().zip(right.iter()).enumerate() {
                // Each side performs two additions, each rounding at eps
                // relative to a partial sum bounded by the magnitude sum.
                let mag = a.data()[i].abs() + b.data()[i].abs() + c.data()[i].abs();
                prop_assert!((l - r).abs() <= 3.0 * mag.max(1e-300) * f64::EPSILON, "{l} vs {r}");
            }
        }
    }
}
