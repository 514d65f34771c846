//! Binary checkpoint format for parameters and optimizer state.
//!
//! Layout: magic "TDGCKPT1", u32 entry count, then per parameter a name
//! (u32 length + UTF-8 bytes), u32 rank, u32 dimensions, and little-endian
//! f64 values. Optimizer state follows under the "OPTSTATE" tag: u64 step
//! counter, then first and second moment tables in the same entry scheme.
//! Round-trips are bit-exact.

use indexmap::IndexMap;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TDGCKPT1";
const OPT_TAG: &[u8; 8] = b"OPTSTATE";

fn write_entry(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        write_entry(out, name, tensor);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn entry(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|e| Error::Format(format!("parameter name not UTF-8: {e}")))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = self.take(count * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }

    fn table(&mut self) -> Result<IndexMap<String, Tensor>> {
        let count = self.u32()? as usize;
        let mut map = IndexMap::with_capacity(count);
        for _ in 0..count {
            let (name, tensor) = self.entry()?;
            if map.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate checkpoint entry {name:?}")));
            }
        }
        Ok(map)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn to_bytes(params: &ParameterSet, opt: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_table(&mut out, params.iter());
    if let Some(state) = opt {
        out.extend_from_slice(OPT_TAG);
        out.extend_from_slice(&state.step().to_le_bytes());
        let (first, second) = state.moments();
        write_table(&mut out, first.iter().map(|(k, v)| (k.as_str(), v)));
        write_table(&mut out, second.iter().map(|(k, v)| (k.as_str(), v)));
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<(ParameterSet, Option<OptimizerState>)> {
    let mut r = Reader::new(buf);
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let table = r.table()?;
    let mut params = ParameterSet::new();
    for (name, tensor) in table {
        params.insert(name, tensor);
    }
    if r.done() {
        return Ok((params, None));
    }
    let tag = r.take(8)?;
    if tag != OPT_TAG {
        return Err(Error::Format(format!(
            "unexpected section tag {:?}",
            String::from_utf8_lossy(tag)
        )));
    }
    let step = r.u64()?;
    let first = r.table()?;
    let second = r.table()?;
    if !r.done() {
        return Err(Error::Format(format!(
            "trailing bytes after optimizer state (at {})",
            r.pos
        )));
    }
    Ok((params, Some(OptimizerState::from_parts(step, first, second))))
}

pub fn save(path: &Path, params: &ParameterSet, opt: Option<&OptimizerState>) -> Result<()> {
    let bytes = to_bytes(params, opt);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterSet, Option<OptimizerState>)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}
