//! Little-endian binary weight files.
//!
//! ```text
//! magic      b"REPF"
//! version    u16 (= 1)
//! endianness u8  (0 = little)
//! precision  u8  (0 = f32, 1 = f64)
//! count      u32
//! directory  count x { name_len u16, name utf-8, rank u8, dims u32 x rank, offset u64 }
//! payload    tensor data, offsets relative to the payload start
//! ```
//!
//! Tensors are named `stage{i}.block{j}.branch{k}.<field>` where `i` is the
//! graph node index, `j` the leaf layer inside that block, and `k` the branch
//! (0 = 3x3 or the only conv, 1 = 1x1, 2 = identity). Fields are `weight`,
//! `bias` and `bn.{gamma,beta,running_mean,running_var,eps}`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::arch::{build_model, fuse_model, ModelSpec, NetworkGraph};
use crate::blocks::{Leaf, LeafMut};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{BatchNormParams, ConvParams, Element, Precision};

pub const MAGIC: [u8; 4] = *b"REPF";
pub const FORMAT_VERSION: u16 = 1;
const LITTLE_ENDIAN: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// In-memory contents of a weight file, in directory order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

fn precision_flag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

fn bad<X>(msg: impl Into<String>) -> Result<X> {
    Err(Error::WeightFormat(msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos..self.pos + n) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => bad(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Precision recorded in an encoded file, checking the magic on the way.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return bad(format!("bad magic {magic:02x?}, expected \"REPF\""));
    }
    let version = r.u16("format version")?;
    if version != FORMAT_VERSION {
        return bad(format!("unsupported format version {version}"));
    }
    if r.u8("endianness")? != LITTLE_ENDIAN {
        return bad("only little-endian files are supported");
    }
    match r.u8("precision")? {
        0 => Ok(Precision::F32),
        1 => Ok(Precision::F64),
        p => bad(format!("unknown precision flag {p}")),
    }
}

pub fn file_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    peek_precision(&bytes)
}

impl<T: Element> WeightFile<T> {
    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// True when the file holds unfolded batch norms, i.e. a training-form graph.
    pub fn is_train_form(&self) -> bool {
        self.tensors.iter().any(|t| t.name.contains(".bn."))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let w = T::PRECISION.byte_width();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(LITTLE_ENDIAN);
        out.push(precision_flag(T::PRECISION));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (t.data.len() * w) as u64;
        }
        for t in &self.tensors {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = peek_precision(bytes)?;
        if precision != T::PRECISION {
            return bad(format!(
                "file holds {precision:?} tensors, {:?} requested",
                T::PRECISION
            ));
        }
        let w = precision.byte_width();
        let mut r = Reader { bytes, pos: 8 };
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::WeightFormat(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            if rank == 0 || rank > 4 {
                return bad(format!("tensor {name} has rank {rank}"));
            }
            let shape = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64("offset")?;
            entries.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];

        let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(entries.len());
        for (name, shape, offset) in &entries {
            let size = shape.iter().try_fold(w as u64, |acc, &d| acc.checked_mul(d as u64));
            let end = size.and_then(|s| offset.checked_add(s));
            match end {
                Some(end) if end <= payload.len() as u64 => ranges.push((*offset, end, name)),
                _ => {
                    return bad(format!(
                        "tensor {name} runs past the end of the payload ({} bytes); file is truncated or corrupt",
                        payload.len()
                    ))
                }
            }
        }
        ranges.sort_unstable();
        for pair in ranges.windows(2) {
            if pair[1].0 < pair[0].1 {
                return bad(format!("tensors {} and {} overlap", pair[0].2, pair[1].2));
            }
        }

        let mut seen = HashMap::new();
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, offset) in entries {
            if seen.insert(name.clone(), ()).is_some() {
                return bad(format!("duplicate tensor {name}"));
            }
            let n: usize = shape.iter().product();
            let start = offset as usize;
            let data = payload[start..start + n * w].chunks_exact(w).map(T::read_le).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(WeightFile { tensors })
    }
}

fn leaf_prefix(node: usize, leaf: usize, branch: usize) -> String {
    format!("stage{node}.block{leaf}.branch{branch}")
}

fn conv_slots<'a, T: Element>(
    p: &'a ConvParams<T>,
    prefix: &str,
    out: &mut Vec<(String, Vec<usize>, &'a [T])>,
) {
    out.push((format!("{prefix}.weight"), p.weight.shape().to_vec(), &p.weight.data));
    if let Some(b) = &p.bias {
        out.push((format!("{prefix}.bias"), vec![b.len()], b));
    }
}

fn bn_slots<'a, T>(
    bn: &'a BatchNormParams<T>,
    prefix: &str,
    out: &mut Vec<(String, Vec<usize>, &'a [T])>,
) {
    let c = bn.gamma.len();
    for (field, v) in [
        ("gamma", &bn.gamma),
        ("beta", &bn.beta),
        ("running_mean", &bn.running_mean),
        ("running_var", &bn.running_var),
    ] {
        out.push((format!("{prefix}.bn.{field}"), vec![c], v));
    }
    out.push((format!("{prefix}.bn.eps"), vec![1], std::slice::from_ref(&bn.eps)));
}

type SlotMut<'a, T> = (String, Vec<usize>, &'a mut [T]);

fn conv_slots_mut<'a, T: Element>(p: &'a mut ConvParams<T>, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
    let shape = p.weight.shape().to_vec();
    out.push((format!("{prefix}.weight"), shape, &mut p.weight.data));
    if let Some(b) = &mut p.bias {
        out.push((format!("{prefix}.bias"), vec![b.len()], b));
    }
}

fn bn_slots_mut<'a, T>(bn: &'a mut BatchNormParams<T>, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
    let c = bn.gamma.len();
    let BatchNormParams {
        gamma,
        beta,
        running_mean,
        running_var,
        eps,
    } = bn;
    for (field, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        out.push((format!("{prefix}.bn.{field}"), vec![c], v));
    }
    out.push((format!("{prefix}.bn.eps"), vec![1], std::slice::from_mut(eps)));
}

/// Every named tensor of `g`, in export order.
fn slots<T: Element>(g: &NetworkGraph<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let mut out = Vec::new();
    for (i, _, block) in g.blocks() {
        for (j, leaf) in block.leaves().into_iter().enumerate() {
            let p = |k| leaf_prefix(i, j, k);
            match leaf {
                Leaf::RepTrain(rc) => {
                    conv_slots(&rc.dense.conv, &p(0), &mut out);
                    bn_slots(&rc.dense.bn, &p(0), &mut out);
                    conv_slots(&rc.pointwise.conv, &p(1), &mut out);
                    bn_slots(&rc.pointwise.bn, &p(1), &mut out);
                    if let Some(bn) = &rc.identity {
                        bn_slots(bn, &p(2), &mut out);
                    }
                }
                Leaf::RepFused(fc) => conv_slots(&fc.params, &p(0), &mut out),
                Leaf::Conv(c) => {
                    conv_slots(&c.conv, &p(0), &mut out);
                    if let Some(bn) = &c.bn {
                        bn_slots(bn, &p(0), &mut out);
                    }
                }
            }
        }
    }
    out
}

fn slots_mut<T: Element>(g: &mut NetworkGraph<T>) -> Vec<SlotMut<'_, T>> {
    let mut out = Vec::new();
    for (i, block) in g.blocks_mut() {
        for (j, leaf) in block.leaves_mut().into_iter().enumerate() {
            let p = |k| leaf_prefix(i, j, k);
            match leaf {
                LeafMut::RepTrain(rc) => {
                    conv_slots_mut(&mut rc.dense.conv, &p(0), &mut out);
                    bn_slots_mut(&mut rc.dense.bn, &p(0), &mut out);
                    conv_slots_mut(&mut rc.pointwise.conv, &p(1), &mut out);
                    bn_slots_mut(&mut rc.pointwise.bn, &p(1), &mut out);
                    if let Some(bn) = &mut rc.identity {
                        bn_slots_mut(bn, &p(2), &mut out);
                    }
                }
                LeafMut::RepFused(fc) => conv_slots_mut(&mut fc.params, &p(0), &mut out),
                LeafMut::Conv(c) => {
                    conv_slots_mut(&mut c.conv, &p(0), &mut out);
                    if let Some(bn) = &mut c.bn {
                        bn_slots_mut(bn, &p(0), &mut out);
                    }
                }
            }
        }
    }
    out
}

/// Snapshot of every parameter tensor in `g`.
pub fn collect_weights<T: Element>(g: &NetworkGraph<T>) -> WeightFile<T> {
    WeightFile {
        tensors: slots(g)
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect(),
    }
}

/// Overwrites the parameters of `g` with the tensors of `file`, which must
/// name exactly the tensors of `g` with matching shapes.
pub fn load_weights<T: Element>(g: &mut NetworkGraph<T>, file: &WeightFile<T>) -> Result<()> {
    let mut by_name: HashMap<&str, &NamedTensor<T>> =
        file.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for (name, shape, dst) in slots_mut(g) {
        let src = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if src.shape != shape {
            return Err(Error::WeightShape {
                name,
                file: src.shape.clone(),
                model: shape,
            });
        }
        dst.copy_from_slice(&src.data);
    }
    if let Some(extra) = file.tensors.iter().find(|t| by_name.contains_key(t.name.as_str())) {
        return bad(format!("tensor {} does not exist in the model", extra.name));
    }
    Ok(())
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_weights<T: Element>(file: &WeightFile<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &file.to_bytes())
}

pub fn read_weights<T: Element>(path: impl AsRef<Path>) -> Result<WeightFile<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightFile::from_bytes(&bytes)
}

pub fn export_weights<T: Element>(g: &NetworkGraph<T>, path: impl AsRef<Path>) -> Result<WeightFile<T>> {
    let file = collect_weights(g);
    write_weights(&file, path)?;
    Ok(file)
}

/// Builds the graph described by `spec` and fills it from `path`. Files
/// without batch-norm tensors load into the fused form of the graph.
pub fn import_weights<T: Element>(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<NetworkGraph<T>> {
    let file = read_weights::<T>(path)?;
    let skeleton = build_model::<T>(spec, Init::Zeros)?;
    let mut g = if file.is_train_form() || file.tensors.is_empty() {
        skeleton
    } else {
        fuse_model(&skeleton)?
    };
    load_weights(&mut g, &file)?;
    Ok(g)
}
