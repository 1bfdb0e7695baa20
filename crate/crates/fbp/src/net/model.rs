//! Model persistence.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            4 bytes  "FBPM"
//! version          u32      currently 1
//! -- spec block --
//! arch tag         u8       0 custom, 1..3 cnn-1..3
//! in_channels      u32
//! stored_size      u32
//! crop_size        u32
//! n_layers         u32
//!   per layer: kind u8 (0 conv, 1 pool, 2 fc, 3 dropout)
//!     conv:    out_maps u32, kernel u32
//!     pool:    (nothing; factor fixed at 2)
//!     fc:      out_neurons u32, relu u8
//!     dropout: keep f64
//! -- descriptor block --
//! channel set tag  u8       0 a, 1 b, 2 rgb, 3 base, 4 detail, 5 combined
//! n_means          u32, then f64 per-channel means
//! wls              f64 lambda, alpha, eps, cg_tol; u64 cg_max_iters
//! score norm       f64 mean, f64 std (prediction = mean + std·output)
//! dtype            u8       4 = f32, 8 = f64
//! -- tensors --
//! n_tensors        u32
//!   per tensor: rank u8, extents u32 × rank, payload (elements × dtype)
//!   order: layer order, weight before bias; only parameterized layers
//! checksum         u64      FNV-1a over every preceding byte
//! ```
//!
//! Momentum state is not persisted; a loaded model starts with zero
//! velocity. The dtype must match the precision of the loading run.

use super::{ArchName, LayerSpec, Network, NetworkSpec, ParamTensor};
use crate::error::{Error, Result};
use crate::imageproc::{ChannelSet, WlsParams};
use crate::real::Real;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FBPM";
const VERSION: u32 = 1;

/// Which facial planes feed the model, the input normalization applied to
/// them, the decomposition parameters that produced them, and the affine
/// score normalization the network was trained against.
///
/// Network inputs are `(plane_c - means[c]) * gains[c]` (per-channel
/// statistics of the training split); a prediction in score units is
/// `score_mean + score_std · output`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDescriptor {
    pub channel_set: ChannelSet,
    pub means: Vec<f64>,
    pub gains: Vec<f64>,
    pub wls: WlsParams,
    pub score_mean: f64,
    pub score_std: f64,
}

impl ChannelDescriptor {
    pub fn new(channel_set: ChannelSet, means: Vec<f64>, wls: WlsParams) -> Self {
        let gains = vec![1.0; means.len()];
        ChannelDescriptor { channel_set, means, gains, wls, score_mean: 0.0, score_std: 1.0 }
    }

    pub fn with_input_gains(mut self, gains: Vec<f64>) -> Self {
        assert_eq!(gains.len(), self.means.len());
        self.gains = gains;
        self
    }

    pub fn with_score_norm(mut self, mean: f64, std: f64) -> Self {
        self.score_mean = mean;
        self.score_std = std;
        self
    }

    /// Map a raw network output into score units.
    pub fn to_score(&self, raw: f64) -> f64 {
        self.score_mean + self.score_std * raw
    }
}

/// A deserialized model: the network plus its channel descriptor.
#[derive(Debug, Clone)]
pub struct ModelFile<T> {
    pub network: Network<T>,
    pub descriptor: ChannelDescriptor,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!("truncated record at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_model_bytes<T: Real>(net: &Network<T>, desc: &ChannelDescriptor) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);

    let spec = net.spec();
    w.u8(spec.name.tag());
    w.u32(spec.in_channels as u32);
    w.u32(spec.stored_size as u32);
    w.u32(spec.crop_size as u32);
    w.u32(spec.layers.len() as u32);
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv { out_maps, kernel } => {
                w.u8(0);
                w.u32(out_maps as u32);
                w.u32(kernel as u32);
            }
            LayerSpec::Pool => w.u8(1),
            LayerSpec::FullyConnected { out_neurons, relu } => {
                w.u8(2);
                w.u32(out_neurons as u32);
                w.u8(relu as u8);
            }
            LayerSpec::Dropout { keep } => {
                w.u8(3);
                w.f64(keep);
            }
        }
    }

    w.u8(desc.channel_set.tag());
    w.u32(desc.means.len() as u32);
    for &m in &desc.means {
        w.f64(m);
    }
    w.f64(desc.wls.lambda);
    w.f64(desc.wls.alpha);
    w.f64(desc.wls.eps);
    w.f64(desc.wls.cg_tol);
    w.u64(desc.wls.cg_max_iters as u64);
    w.f64(desc.score_mean);
    w.f64(desc.score_std);
    w.u8(T::DTYPE_TAG);

    let tensors: Vec<&Tensor<T>> = net
        .params()
        .iter()
        .flatten()
        .flat_map(|p| [&p.w, &p.b])
        .collect();
    w.u32(tensors.len() as u32);
    for t in tensors {
        w.u8(t.rank() as u8);
        for &e in t.shape() {
            w.u32(e as u32);
        }
        for &v in t.data() {
            v.write_le(&mut w.buf);
        }
    }

    let checksum = crate::util::fnv1a(&w.buf);
    w.u64(checksum);
    w.buf
}

pub fn load_model_bytes<T: Real>(bytes: &[u8]) -> Result<ModelFile<T>> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Corrupt("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let actual = crate::util::fnv1a(body);
    if stored != actual {
        return Err(Error::Corrupt(format!(
            "checksum mismatch: stored {stored:016x}, computed {actual:016x}"
        )));
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { found: version, supported: VERSION });
    }

    let name = ArchName::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("bad arch tag".into()))?;
    let in_channels = r.u32()? as usize;
    let stored_size = r.u32()? as usize;
    let crop_size = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let kind = r.u8()?;
        layers.push(match kind {
            0 => LayerSpec::Conv { out_maps: r.u32()? as usize, kernel: r.u32()? as usize },
            1 => LayerSpec::Pool,
            2 => LayerSpec::FullyConnected { out_neurons: r.u32()? as usize, relu: r.u8()? != 0 },
            3 => LayerSpec::Dropout { keep: r.f64()? },
            k => return Err(Error::Corrupt(format!("unknown layer kind {k}"))),
        });
    }
    let spec = NetworkSpec { name, in_channels, stored_size, crop_size, layers };

    let channel_set =
        ChannelSet::from_tag(r.u8()?).ok_or_else(|| Error::Corrupt("bad channel set tag".into()))?;
    let n_means = r.u32()? as usize;
    let mut means = Vec::with_capacity(n_means);
    for _ in 0..n_means {
        means.push(r.f64()?);
    }
    let wls = WlsParams {
        lambda: r.f64()?,
        alpha: r.f64()?,
        eps: r.f64()?,
        cg_tol: r.f64()?,
        cg_max_iters: r.u64()? as usize,
    };
    let score_mean = r.f64()?;
    let score_std = r.f64()?;
    let dtype = r.u8()?;
    if dtype != T::DTYPE_TAG {
        return Err(Error::Arg(format!(
            "model stores {}-byte elements but this run uses {}-byte precision; \
             rerun with the matching --precision",
            dtype,
            T::BYTES
        )));
    }

    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Corrupt(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * T::BYTES)?;
        let data: Vec<T> = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push(Tensor::from_vec(&shape, data).map_err(|e| Error::Corrupt(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }

    // Re-associate tensors with parameterized layers.
    let mut iter = tensors.into_iter();
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        match layer {
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. } => {
                let w = iter.next().ok_or_else(|| Error::Corrupt("missing weight tensor".into()))?;
                let b = iter.next().ok_or_else(|| Error::Corrupt("missing bias tensor".into()))?;
                params.push(Some(ParamTensor { w, b }));
            }
            _ => params.push(None),
        }
    }
    if iter.next().is_some() {
        return Err(Error::Corrupt("extra tensor records".into()));
    }

    let network = Network::from_parts(spec, params)?;
    Ok(ModelFile {
        network,
        descriptor: ChannelDescriptor { channel_set, means, wls, score_mean, score_std },
    })
}

pub fn save_model<T: Real>(net: &Network<T>, desc: &ChannelDescriptor, path: &Path) -> Result<()> {
    std::fs::write(path, save_model_bytes(net, desc)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Real>(path: &Path) -> Result<ModelFile<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_model_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::AdaptMode;

    fn descriptor() -> ChannelDescriptor {
        ChannelDescriptor::new(ChannelSet::Detail, vec![0.017], WlsParams::default())
    }

    #[test]
    fn roundtrip_bit_exact() {
        let spec = NetworkSpec::cnn1(1);
        let net = Network::<f64>::build(&spec, 1, 7).unwrap();
        let bytes = save_model_bytes(&net, &descriptor());
        let loaded = load_model_bytes::<f64>(&bytes).unwrap();
        assert_eq!(loaded.network.spec(), net.spec());
        assert_eq!(loaded.descriptor, descriptor());
        for (a, b) in net.params().iter().zip(loaded.network.params()) {
            assert_eq!(a, b);
        }
        // Save of the load reproduces the bytes exactly.
        assert_eq!(save_model_bytes(&loaded.network, &loaded.descriptor), bytes);
    }

    #[test]
    fn corruption_detected() {
        let net = Network::<f64>::build(&NetworkSpec::cnn1(1), 1, 7).unwrap();
        let bytes = save_model_bytes(&net, &descriptor());
        for pos in [4, 40, bytes.len() / 2, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            match load_model_bytes::<f64>(&bad) {
                Err(Error::Corrupt(_)) => {}
                other => panic!("byte {pos}: expected corruption error, got {other:?}"),
            }
        }
    }

    #[test]
    fn precision_mismatch_rejected() {
        let net = Network::<f32>::build(&NetworkSpec::cnn1(1), 1, 7).unwrap();
        let bytes = save_model_bytes(&net, &descriptor());
        assert!(matches!(load_model_bytes::<f64>(&bytes), Err(Error::Arg(_))));
        assert!(load_model_bytes::<f32>(&bytes).is_ok());
    }

    #[test]
    fn adapt_after_load_preserves_deeper_layers() {
        let net = Network::<f64>::build(&NetworkSpec::cnn1(1), 1, 7).unwrap();
        let bytes = save_model_bytes(&net, &descriptor());
        let loaded = load_model_bytes::<f64>(&bytes).unwrap();
        let adapted = loaded.network.adapt_input(3, 99, AdaptMode::Reinit).unwrap();
        let bytes2 = save_model_bytes(&adapted, &descriptor());
        let reloaded = load_model_bytes::<f64>(&bytes2).unwrap();
        for (i, (a, b)) in net.params().iter().zip(reloaded.network.params()).enumerate() {
            if i == 0 {
                let a = a.as_ref().unwrap();
                let b = b.as_ref().unwrap();
                assert_eq!(a.w.shape(), &[50, 1, 7, 7]);
                assert_eq!(b.w.shape(), &[50, 3, 7, 7]);
            } else {
                assert_eq!(a, b, "layer {i} must survive adaptation and reserialization");
            }
        }
    }

    #[test]
    fn version_gate() {
        let net = Network::<f64>::build(&NetworkSpec::cnn1(1), 1, 7).unwrap();
        let mut bytes = save_model_bytes(&net, &descriptor());
        // Bump the version field and re-seal the checksum.
        bytes[4] = 2;
        let body_len = bytes.len() - 8;
        let sum = crate::util::fnv1a(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(load_model_bytes::<f64>(&bytes), Err(Error::Version { found: 2, .. })));
    }
}
