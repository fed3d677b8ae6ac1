use nalgebra::DMatrix;

/// Dense `h x t x c` array, channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub t: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, t: usize, c: usize) -> Self {
        Self { h, t, c, data: vec![0.0; h * t * c] }
    }

    pub fn from_vec(h: usize, t: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * t * c, "tensor data length");
        Self { h, t, c, data }
    }

    /// `1 x 1 x len` tensor holding a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let c = data.len();
        Self { h: 1, t: 1, c, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.t, self.c]
    }

    #[inline]
    pub fn idx(&self, h: usize, t: usize, c: usize) -> usize {
        (h * self.t + t) * self.c + c
    }

    #[inline]
    pub fn get(&self, h: usize, t: usize, c: usize) -> f64 {
        self.data[self.idx(h, t, c)]
    }

    /// Stacks `N x T` matrices as channels.
    pub fn from_slabs<'a>(slabs: impl IntoIterator<Item = &'a DMatrix<f64>>) -> Self {
        let slabs: Vec<&DMatrix<f64>> = slabs.into_iter().collect();
        let (h, t, c) = (slabs[0].nrows(), slabs[0].ncols(), slabs.len());
        let mut out = Self::zeros(h, t, c);
        for (k, s) in slabs.iter().enumerate() {
            for i in 0..h {
                for j in 0..t {
                    let at = out.idx(i, j, k);
                    out.data[at] = s[(i, j)];
                }
            }
        }
        out
    }

    /// Concatenates tensors of equal `h`, `t` along channels.
    pub fn concat_channels(parts: &[&Tensor3]) -> Self {
        let (h, t) = (parts[0].h, parts[0].t);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(h * t * c);
        for pos in 0..h * t {
            for p in parts {
                data.extend_from_slice(&p.data[pos * p.c..(pos + 1) * p.c]);
            }
        }
        Self { h, t, c, data }
    }

    /// Inverse of `concat_channels` for the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Tensor3> {
        let mut parts: Vec<Tensor3> = counts.iter().map(|&c| Tensor3::zeros(self.h, self.t, c)).collect();
        for pos in 0..self.h * self.t {
            let mut off = pos * self.c;
            for p in &mut parts {
                p.data[pos * p.c..(pos + 1) * p.c].copy_from_slice(&self.data[off..off + p.c]);
                off += p.c;
            }
        }
        parts
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
