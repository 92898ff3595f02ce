//! SVBRDF material maps, packing into a three-map stack, augmentations.

pub mod codec;
pub mod io;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{HimatError, Result};
use crate::tensor::Tensor;

pub use codec::{CodecMode, ToyCodec};
pub use synth::{synth_dataset, synth_item, Family, SynthItem};

/// Number of maps after packing roughness, metallic and height together.
pub const PACKED_MAPS: usize = 3;

/// Five pixel-aligned maps. Normals are stored encoded, `(n + 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSet {
    /// `[H, W, 3]`
    pub basecolor: Tensor,
    /// `[H, W, 3]`
    pub normal: Tensor,
    /// `[H, W]`
    pub roughness: Tensor,
    /// `[H, W]`
    pub metallic: Tensor,
    /// `[H, W]`
    pub height: Tensor,
}

impl MaterialSet {
    pub fn dims(&self) -> (usize, usize) {
        (self.height.shape()[0], self.height.shape()[1])
    }

    fn check_shapes(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.basecolor.shape()[0], self.basecolor.shape().get(1).copied().unwrap_or(0));
        let ok = self.basecolor.shape() == [h, w, 3]
            && self.normal.shape() == [h, w, 3]
            && [&self.roughness, &self.metallic, &self.height].iter().all(|t| t.shape() == [h, w]);
        if !ok {
            return Err(HimatError::shape(
                "material",
                format!(
                    "basecolor {:?}, normal {:?}, roughness {:?}, metallic {:?}, height {:?}",
                    self.basecolor.shape(),
                    self.normal.shape(),
                    self.roughness.shape(),
                    self.metallic.shape(),
                    self.height.shape()
                ),
            ));
        }
        Ok((h, w))
    }

    /// Checks shapes, the `[0, 1]` range and unit decoded normals.
    pub fn validate(&self, normal_tol: f64) -> Result<()> {
        self.check_shapes()?;
        for (name, t) in self.named_maps() {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(HimatError::InvalidConfig(format!("{name} has values outside [0, 1]")));
            }
        }
        let worst = decoded_normal_norms(&self.normal).iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
        if worst > normal_tol {
            return Err(HimatError::InvalidConfig(format!("normal length deviates by {worst:.3e}")));
        }
        Ok(())
    }

    pub fn named_maps(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("basecolor", &self.basecolor),
            ("normal", &self.normal),
            ("roughness", &self.roughness),
            ("metallic", &self.metallic),
            ("height", &self.height),
        ]
    }

    fn map_all(&self, f: impl Fn(&Tensor) -> Tensor) -> MaterialSet {
        MaterialSet {
            basecolor: f(&self.basecolor),
            normal: f(&self.normal),
            roughness: f(&self.roughness),
            metallic: f(&self.metallic),
            height: f(&self.height),
        }
    }

    /// Mirrors columns; the normal x component changes sign.
    pub fn flip_horizontal(&self) -> MaterialSet {
        let mut out = self.map_all(|t| flip_axis(t, 1));
        negate_encoded(&mut out.normal, 0);
        out
    }

    /// Mirrors rows; the normal y component changes sign.
    pub fn flip_vertical(&self) -> MaterialSet {
        let mut out = self.map_all(|t| flip_axis(t, 0));
        negate_encoded(&mut out.normal, 1);
        out
    }

    /// Swaps rows and columns; normal x and y swap.
    pub fn transpose(&self) -> MaterialSet {
        let mut out = self.map_all(transpose_hw);
        let n = &mut out.normal;
        for px in n.data_mut().chunks_mut(3) {
            px.swap(0, 1);
        }
        out
    }

    /// Rotation by `quarter_turns * 90` degrees; one turn maps
    /// `out[i][j] = in[j][W-1-i]`, implemented as a transpose followed by a
    /// vertical flip so the normal corrections compose.
    pub fn rotate90(&self, quarter_turns: usize) -> MaterialSet {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            out = out.transpose().flip_vertical();
        }
        out
    }

    /// One of the eight symmetries of the square, indexed `0..8`:
    /// `k % 4` quarter turns, then a horizontal flip when `k >= 4`.
    pub fn dihedral(&self, k: usize) -> MaterialSet {
        let r = self.rotate90(k % 4);
        if k % 8 >= 4 {
            r.flip_horizontal()
        } else {
            r
        }
    }
}

fn flip_axis(t: &Tensor, axis: usize) -> Tensor {
    let shape = t.shape().to_vec();
    let n = shape[axis];
    Tensor::from_fn(&shape, |idx| {
        let mut src = idx.to_vec();
        src[axis] = n - 1 - idx[axis];
        t.get(&src)
    })
}

fn transpose_hw(t: &Tensor) -> Tensor {
    let mut axes: Vec<usize> = (0..t.rank()).collect();
    axes.swap(0, 1);
    t.permute(&axes).expect("rank >= 2")
}

fn negate_encoded(n: &mut Tensor, comp: usize) {
    for px in n.data_mut().chunks_mut(3) {
        px[comp] = 1.0 - px[comp];
    }
}

/// Per-pixel length of `2 n - 1` for an encoded `[H, W, 3]` normal map.
pub fn decoded_normal_norms(n: &Tensor) -> Vec<f64> {
    n.data()
        .chunks(3)
        .map(|px| px.iter().map(|v| (2.0 * v - 1.0).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `[3, H, W, 3]`: basecolor, normal, then roughness/metallic/height as channels.
pub fn pack_maps(m: &MaterialSet) -> Result<Tensor> {
    let (h, w) = m.check_shapes()?;
    let mut data = Vec::with_capacity(PACKED_MAPS * h * w * 3);
    data.extend_from_slice(m.basecolor.data());
    data.extend_from_slice(m.normal.data());
    for i in 0..h * w {
        data.extend([m.roughness.data()[i], m.metallic.data()[i], m.height.data()[i]]);
    }
    Tensor::new(&[PACKED_MAPS, h, w, 3], data)
}

/// Unit light direction of the toy renderer.
pub const LIGHT: [f64; 3] = [0.3, 0.4, 0.8660254037844386];

/// Lambertian shading `max(0, n . l)` of the decoded normals, `[H, W]`.
pub fn irradiance(m: &MaterialSet) -> Tensor {
    let (h, w) = m.dims();
    Tensor::from_fn(&[h, w], |i| {
        let n: [f64; 3] = std::array::from_fn(|c| 2.0 * m.normal.get(&[i[0], i[1], c]) - 1.0);
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        (n.iter().zip(LIGHT).map(|(a, b)| a * b).sum::<f64>() / len).max(0.0)
    })
}

/// Basecolor times shading: the "photograph" the decomposition task starts from.
pub fn render(m: &MaterialSet) -> Tensor {
    let e = irradiance(m);
    Tensor::from_fn(m.basecolor.shape(), |i| m.basecolor.get(i) * e.get(&i[..2]))
}

/// `[3, H, W, 3]`: albedo, normal, and irradiance repeated over RGB.
pub fn intrinsic_stack(m: &MaterialSet) -> Result<Tensor> {
    let (h, w) = m.check_shapes()?;
    let e = irradiance(m);
    let mut data = Vec::with_capacity(PACKED_MAPS * h * w * 3);
    data.extend_from_slice(m.basecolor.data());
    data.extend_from_slice(m.normal.data());
    data.extend(e.data().iter().flat_map(|&v| [v; 3]));
    Tensor::new(&[PACKED_MAPS, h, w, 3], data)
}

/// An RGB image `[H, W, 3]` repeated into every slot of a stack.
pub fn replicate_image(img: &Tensor) -> Result<Tensor> {
    Tensor::stack(&vec![img.clone(); PACKED_MAPS])
}

pub fn unpack_maps(p: &Tensor) -> Result<MaterialSet> {
    let s = p.shape();
    if s.len() != 4 || s[0] != PACKED_MAPS || s[3] != 3 {
        return Err(HimatError::shape("unpack_maps", format!("expected [3, H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = |c: usize| {
        let rmh = p.index_first(2);
        Tensor::new(&[h, w], rmh.data().chunks(3).map(|px| px[c]).collect()).expect("non-empty")
    };
    Ok(MaterialSet {
        basecolor: p.index_first(0),
        normal: p.index_first(1),
        roughness: plane(0),
        metallic: plane(1),
        height: plane(2),
    })
}

/// Geometric augmentation applied jointly to every map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    FlipHorizontal,
    FlipVertical,
    Rotate90(usize),
}

impl Augment {
    pub fn apply(&self, m: &MaterialSet) -> MaterialSet {
        match *self {
            Augment::FlipHorizontal => m.flip_horizontal(),
            Augment::FlipVertical => m.flip_vertical(),
            Augment::Rotate90(k) => m.rotate90(k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(seed: u64, h: usize, w: usize) -> MaterialSet {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |s: &[usize]| Tensor::rand_uniform(s, 0.0, 1.0, &mut r);
        MaterialSet {
            basecolor: u(&[h, w, 3]),
            normal: u(&[h, w, 3]),
            roughness: u(&[h, w]),
            metallic: u(&[h, w]),
            height: u(&[h, w]),
        }
    }

    #[test]
    fn pack_roundtrip() {
        let m = random_set(1, 5, 7);
        let p = pack_maps(&m).unwrap();
        assert_eq!(p.shape(), [3, 5, 7, 3]);
        assert_eq!(unpack_maps(&p).unwrap(), m);
        assert_eq!(p.get(&[2, 3, 4, 0]), m.roughness.get(&[3, 4]));
        assert_eq!(p.get(&[2, 3, 4, 2]), m.height.get(&[3, 4]));
    }

    #[test]
    fn pack_rejects_mismatch() {
        let mut m = random_set(2, 4, 4);
        m.height = Tensor::zeros(&[4, 5]);
        assert!(matches!(pack_maps(&m), Err(HimatError::ShapeMismatch { .. })));
    }

    #[test]
    fn flat_normal_is_unit_z() {
        let n = Tensor::from_fn(&[2, 2, 3], |i| [0.5, 0.5, 1.0][i[2]]);
        for len in decoded_normal_norms(&n) {
            assert!((len - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let m = random_set(3, 4, 6);
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
        assert_eq!(m.flip_vertical().flip_vertical(), m);
        assert_eq!(m.transpose().transpose(), m);
    }

    #[test]
    fn four_rotations_are_identity() {
        let m = random_set(4, 5, 5);
        let back = m.rotate90(4);
        assert_eq!(back.height, m.height);
        assert!(back.normal.max_abs_diff(&m.normal).unwrap() < 1e-15);
    }

    #[test]
    fn rotation_layout() {
        let m = random_set(5, 3, 4);
        let r = m.rotate90(1);
        assert_eq!(r.height.shape(), [4, 3]);
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(r.height.get(&[i, j]), m.height.get(&[j, 3 - i]));
            }
        }
    }

    #[test]
    fn flat_normal_gets_cosine_shading() {
        let m = synth::synth_item(1, 0, 8, 8).material;
        let flat = MaterialSet { normal: Tensor::from_fn(&[8, 8, 3], |i| if i[2] == 2 { 1.0 } else { 0.5 }), ..m.clone() };
        assert!(irradiance(&flat).data().iter().all(|&e| (e - LIGHT[2]).abs() < 1e-12));
        let photo = render(&flat);
        assert!((photo.get(&[2, 3, 1]) - flat.basecolor.get(&[2, 3, 1]) * LIGHT[2]).abs() < 1e-12);
        let st = intrinsic_stack(&m).unwrap();
        assert_eq!(st.shape(), [3, 8, 8, 3]);
        assert_eq!(st.get(&[2, 4, 4, 0]), st.get(&[2, 4, 4, 2]));
        assert!(irradiance(&m).data().iter().all(|&e| (0.0..=1.0).contains(&e)));
    }
}
