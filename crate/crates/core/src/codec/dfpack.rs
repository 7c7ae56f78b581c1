//! The `.dfpack` binary container for packed models.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      4 bytes  "DFPK"
//! version    u16      currently 1
//! d          u8       RAM image depth budget
//! layers     u8       cascade layer count
//! per layer, per forest (2), per group (4):
//!   word_count u32
//!   words      word_count x u32
//! per layer:
//!   feature_count u16
//!   per feature: scale f64, offset f64
//! ```
//!
//! Tree boundaries inside a group block are not delimited; they are
//! recovered (and validated) by pre-order parsing on read.

use super::quant::QuantizationMap;
use super::{
    CodecError, FeatureMap, PackedForest, PackedLayer, PackedModel, NodeWord, TreeRamImage,
    TREES_PER_GROUP,
};
use crate::model::TREES_PER_FOREST;
use std::io::{Read, Write};

pub const DFPACK_MAGIC: [u8; 4] = *b"DFPK";
pub const DFPACK_VERSION: u16 = 1;

const GROUPS_PER_FOREST: usize = TREES_PER_FOREST / TREES_PER_GROUP;

pub fn write_dfpack<W: Write>(mut w: W, model: &PackedModel) -> Result<(), CodecError> {
    if model.layers.len() > u8::MAX as usize {
        return Err(CodecError::BadField {
            field: "layers",
            value: model.layers.len() as u64,
        });
    }
    if model.maps.len() != model.layers.len() {
        return Err(CodecError::BadField {
            field: "quantization map count",
            value: model.maps.len() as u64,
        });
    }
    w.write_all(&DFPACK_MAGIC)?;
    w.write_all(&DFPACK_VERSION.to_le_bytes())?;
    w.write_all(&[model.max_depth])?;
    w.write_all(&[model.layers.len() as u8])?;
    for layer in &model.layers {
        for forest in &layer.forests {
            if forest.groups.len() != GROUPS_PER_FOREST {
                return Err(CodecError::BadField {
                    field: "groups per forest",
                    value: forest.groups.len() as u64,
                });
            }
            for group in &forest.groups {
                w.write_all(&(group.words.len() as u32).to_le_bytes())?;
                for word in &group.words {
                    w.write_all(&word.0.to_le_bytes())?;
                }
            }
        }
    }
    for map in &model.maps {
        if map.width() > u16::MAX as usize {
            return Err(CodecError::BadField {
                field: "feature_count",
                value: map.width() as u64,
            });
        }
        w.write_all(&(map.width() as u16).to_le_bytes())?;
        for f in &map.features {
            w.write_all(&f.scale.to_le_bytes())?;
            w.write_all(&f.offset.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn exact(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), CodecError> {
        self.inner
            .read_exact(buf)
            .map_err(|_| CodecError::Truncated { what })
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CodecError> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CodecError> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CodecError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CodecError> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Read and fully validate a packed model: header, group images (pre-order
/// scan per tree), and per-layer quantization maps.
pub fn read_dfpack<R: Read>(r: R) -> Result<PackedModel, CodecError> {
    let mut c = Cursor { inner: r };
    let mut magic = [0u8; 4];
    c.exact(&mut magic, "magic")?;
    if magic != DFPACK_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = c.u16("version")?;
    if version != DFPACK_VERSION {
        return Err(CodecError::BadVersion {
            got: version,
            expected: DFPACK_VERSION,
        });
    }
    let max_depth = c.u8("depth")?;
    let layer_count = c.u8("layer count")? as usize;
    if layer_count == 0 {
        return Err(CodecError::BadField {
            field: "layers",
            value: 0,
        });
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let mut forests = Vec::with_capacity(2);
        for _ in 0..2 {
            let mut groups = Vec::with_capacity(GROUPS_PER_FOREST);
            for _ in 0..GROUPS_PER_FOREST {
                let count = c.u32("group word count")? as usize;
                let mut words = Vec::with_capacity(count);
                for _ in 0..count {
                    words.push(NodeWord(c.u32("node word")?));
                }
                groups.push(TreeRamImage::from_words(words, max_depth)?);
            }
            forests.push(PackedForest { groups });
        }
        let [a, b]: [PackedForest; 2] = forests.try_into().expect("two forests read");
        layers.push(PackedLayer { forests: [a, b] });
    }
    let mut maps = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let width = c.u16("feature count")? as usize;
        let mut features = Vec::with_capacity(width);
        for _ in 0..width {
            let scale = c.f64("scale")?;
            let offset = c.f64("offset")?;
            if !(scale.is_finite() && scale > 0.0 && offset.is_finite()) {
                return Err(CodecError::BadField {
                    field: "feature map",
                    value: scale.to_bits(),
                });
            }
            features.push(FeatureMap { scale, offset });
        }
        maps.push(QuantizationMap { features });
    }
    let mut trailing = [0u8; 1];
    match c.inner.read(&mut trailing)? {
        0 => {}
        _ => {
            let extra = 1 + std::io::copy(&mut c.inner, &mut std::io::sink())? as usize;
            return Err(CodecError::TrailingBytes(extra));
        }
    }
    let model = PackedModel {
        max_depth,
        layers,
        maps,
    };
    // Cross-checks that the parser cannot express locally.
    model.to_quantized()?;
    Ok(model)
}
