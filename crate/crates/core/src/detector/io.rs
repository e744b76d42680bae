//! Binary model checkpoints ("LFSM") and support-set files ("LFSS").
//! Integers and floats are little-endian; weights and embeddings are f32.

use std::io::{Read, Write};
use std::path::Path;

use super::model::DetectorModel;
use super::support::{SupportEntry, SupportSet};
use super::DetectorConfig;
use crate::capture::Label;
use crate::error::{Error, Result};
use crate::preprocess::InputDims;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFSM";
pub const SUPPORT_MAGIC: &[u8; 4] = b"LFSS";
pub const FORMAT_VERSION: u16 = 1;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        Ok(self.0.write_all(b)?)
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.section));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(format!("invalid UTF-8 in `{}` section", self.section)))
    }
    fn header(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        if self.take(4).map_err(|_| Error::Format(format!("bad magic: not a {what}")))? != magic {
            return Err(Error::Format(format!("bad magic: not a {what}")));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Header, config block (JSON) and input dims, then every named tensor.
pub fn write_checkpoint(model: &DetectorModel, out: impl Write) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(CHECKPOINT_MAGIC)?;
    w.bytes(&FORMAT_VERSION.to_le_bytes())?;
    let config = serde_json::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    w.string(&config)?;
    let dims = model.dims();
    w.u32(dims.num_layers)?;
    w.u32(dims.activation_dim)?;
    w.u32(dims.top_k)?;
    let entries = model.params().entries();
    w.u32(entries.len())?;
    for e in entries {
        w.string(&e.name)?;
        w.u32(e.value.shape().len())?;
        for &d in e.value.shape() {
            w.u32(d)?;
        }
        for &v in e.value.data() {
            w.bytes(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<DetectorModel> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        section: "header",
    };
    r.header(CHECKPOINT_MAGIC, "model checkpoint")?;
    r.section = "config";
    let config: DetectorConfig = serde_json::from_str(&r.string()?).map_err(|e| Error::Format(format!("config block: {e}")))?;
    let dims = InputDims {
        num_layers: r.u32()?,
        activation_dim: r.u32()?,
        top_k: r.u32()?,
    };
    let mut model = DetectorModel::new(&config, dims)?;
    r.section = "weights";
    let count = r.u32()?;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture expects {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != model.params().get(id).shape() {
            return Err(Error::Format(format!("tensor `{name}` has shape {shape:?}")));
        }
        let dst = model.params_mut().get_mut(id).data_mut();
        for v in dst.iter_mut() {
            *v = r.f32()? as f64;
        }
    }
    r.finish()?;
    Ok(model)
}

pub fn save_checkpoint(model: &DetectorModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorModel> {
    read_checkpoint(std::fs::File::open(path)?)
}

/// Header, source tag, dim, count, then per entry `dim` floats and a label byte.
pub fn write_support(support: &SupportSet, out: impl Write) -> Result<()> {
    let mut w = Writer(out);
    w.bytes(SUPPORT_MAGIC)?;
    w.bytes(&FORMAT_VERSION.to_le_bytes())?;
    w.string(&support.source)?;
    let dim = support.entries.first().map_or(0, |e| e.embedding.len());
    w.u32(dim)?;
    w.u32(support.entries.len())?;
    for e in &support.entries {
        if e.embedding.len() != dim {
            return Err(Error::param("support entries have differing dimensions"));
        }
        for &v in &e.embedding {
            w.bytes(&(v as f32).to_le_bytes())?;
        }
        w.bytes(&[e.label.tag()])?;
    }
    Ok(())
}

pub fn read_support(mut input: impl Read) -> Result<SupportSet> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        section: "header",
    };
    r.header(SUPPORT_MAGIC, "support set file")?;
    r.section = "entries";
    let source = r.string()?;
    let dim = r.u32()?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let embedding = (0..dim).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
        let tag = r.u8()?;
        let label = Label::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown label tag {tag}")))?;
        entries.push(SupportEntry { embedding, label });
    }
    r.finish()?;
    Ok(SupportSet { entries, source })
}

pub fn save_support(support: &SupportSet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_support(support, &mut buf)?;
    Ok(std::fs::write(path, buf)?)
}

pub fn load_support(path: &Path) -> Result<SupportSet> {
    read_support(std::fs::File::open(path)?)
}
