//! Named flat parameter collections with congruent gradient buffers, and the
//! binary checkpoint container shared by the denoiser and classifier.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<F> {
    tensors: Vec<ParamTensor<F>>,
}

/// Gradient buffers detached from a parameter set, so several samples can be
/// differentiated concurrently and reduced in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub bufs: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.bufs[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.bufs[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        self.bufs.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn flat(&self) -> impl Iterator<Item = &F> {
        self.bufs.iter().flatten()
    }
}

impl<F: Scalar> ModelParams<F> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<F>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "initial value does not match shape");
        let name = name.into();
        assert!(self.tensors.iter().all(|t| t.name != name), "duplicate parameter {name}");
        self.tensors.push(ParamTensor { name, shape: shape.to_vec(), grad: vec![F::zero(); len], value });
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> ParamId {
        let len: usize = shape.iter().product();
        let v = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(z * std)
            })
            .collect();
        self.add(name, shape, v)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let len: usize = shape.iter().product();
        self.add(name, shape, vec![F::zero(); len])
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.tensors[id.0].value
    }

    pub fn tensors(&self) -> &[ParamTensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<F>] {
        &mut self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor<F>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn gradients_like(&self) -> Gradients<F> {
        Gradients { bufs: self.tensors.iter().map(|t| vec![F::zero(); t.value.len()]).collect() }
    }

    /// Adds detached gradients into the parameter-owned gradient arrays.
    pub fn accumulate_grads(&mut self, g: &Gradients<F>) {
        assert_eq!(g.bufs.len(), self.tensors.len(), "gradient set does not match parameters");
        for (t, b) in self.tensors.iter_mut().zip(&g.bufs) {
            assert_eq!(t.grad.len(), b.len());
            for (x, &y) in t.grad.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Flat (tensor, offset) addressing across all parameters.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let mut rem = flat;
        for (i, t) in self.tensors.iter().enumerate() {
            if rem < t.value.len() {
                return (i, rem);
            }
            rem -= t.value.len();
        }
        panic!("flat index {flat} out of range");
    }

    pub fn flat_value(&self, flat: usize) -> F {
        let (i, o) = self.locate(flat);
        self.tensors[i].value[o]
    }

    pub fn set_flat_value(&mut self, flat: usize, v: F) {
        let (i, o) = self.locate(flat);
        self.tensors[i].value[o] = v;
    }

    pub fn same_layout<G>(&self, other: &ModelParams<G>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    value: t.value.iter().map(|v| G::lit(v.as_f64())).collect(),
                    grad: t.grad.iter().map(|v| G::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Copies values from `src` whose layout must match.
    pub fn copy_values_from(&mut self, src: &ModelParams<F>) -> Result<()> {
        if !self.same_layout(src) {
            return Err(invalid("parameter layouts differ"));
        }
        for (d, s) in self.tensors.iter_mut().zip(&src.tensors) {
            d.value.copy_from_slice(&s.value);
        }
        Ok(())
    }
}

/// Writes a checkpoint: 5-byte magic, u32 config length, JSON config, u32
/// tensor count, then per tensor: u32 name length, name, u32 rank, u32 dims,
/// and the values as little-endian f32. All integers little-endian.
pub fn write_checkpoint<F: Scalar, W: Write>(
    mut w: W,
    magic: &[u8; 5],
    config_json: &str,
    params: &ModelParams<F>,
) -> Result<()> {
    w.write_all(magic)?;
    write_u32(&mut w, config_json.len())?;
    w.write_all(config_json.as_bytes())?;
    write_u32(&mut w, params.tensors.len())?;
    for t in &params.tensors {
        write_u32(&mut w, t.name.len())?;
        w.write_all(t.name.as_bytes())?;
        write_u32(&mut w, t.shape.len())?;
        for &d in &t.shape {
            write_u32(&mut w, d)?;
        }
        let mut buf = Vec::with_capacity(t.value.len() * 4);
        for v in &t.value {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid("value exceeds u32 in checkpoint"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Reads a checkpoint written by [`write_checkpoint`], returning the config
/// JSON and the parameters in declaration order.
pub fn read_checkpoint<F: Scalar, R: Read>(mut r: R, magic: &[u8; 5]) -> Result<(String, ModelParams<F>)> {
    let mut m = [0u8; 5];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let clen = read_u32(&mut r)?;
    let mut cfg = vec![0u8; clen];
    r.read_exact(&mut cfg)?;
    let cfg = String::from_utf8(cfg).map_err(|e| Error::Format(e.to_string()))?;
    let n = read_u32(&mut r)?;
    let mut params = ModelParams::new();
    for _ in 0..n {
        let nl = read_u32(&mut r)?;
        let mut name = vec![0u8; nl];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)?;
        let shape = (0..rank).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let value = raw
            .chunks_exact(4)
            .map(|c| F::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.add(name, &shape, value);
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn checkpoint_roundtrip_preserves_f32_values() {
        let mut rng = rng_from_seed(1);
        let mut p = ModelParams::<f32>::new();
        p.add_normal("a.weight", &[3, 2], 1.0, &mut rng);
        p.add_zeros("a.bias", &[3]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, b"SSDM1", "{\"k\":1}", &p).unwrap();
        assert_eq!(&buf[..5], b"SSDM1");
        let (cfg, q) = read_checkpoint::<f32, _>(&buf[..], b"SSDM1").unwrap();
        assert_eq!(cfg, "{\"k\":1}");
        assert_eq!(p, q);
        assert!(read_checkpoint::<f32, _>(&buf[..], b"SSCL1").is_err());
    }

    #[test]
    fn flat_addressing_spans_tensors() {
        let mut p = ModelParams::<f64>::new();
        p.add("x", &[2], vec![1.0, 2.0]);
        p.add("y", &[3], vec![3.0, 4.0, 5.0]);
        assert_eq!(p.count(), 5);
        assert_eq!(p.flat_value(3), 4.0);
        p.set_flat_value(4, 9.0);
        assert_eq!(p.get(ParamId(1)), &[3.0, 4.0, 9.0]);
        let g = p.gradients_like();
        assert_eq!(g.bufs.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 3]);
    }
}
