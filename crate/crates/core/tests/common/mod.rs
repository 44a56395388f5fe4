//! Fixture helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use base64::Engine;
use c2f_core::backends::{Caller, ChatMessage, ImagePart, ScriptEntry, ScriptKey, ScriptedBackend};
use c2f_core::geometry::{BBox, CoordSpace};
use c2f_core::harness::{Dataset, Sample};
use c2f_core::imaging::{decode_bytes, encode_png, RasterImage};

pub fn space(w: u32, h: u32) -> CoordSpace {
    CoordSpace::new(w, h).unwrap()
}

pub fn bbox(c: [i64; 4], s: CoordSpace) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3], s).unwrap()
}

/// Deterministic, non-uniform test pattern so crops are distinguishable.
pub fn pattern(w: u32, h: u32) -> RasterImage {
    RasterImage::from_fn(w, h, |x, y| [(x * 7 % 251) as u8, (y * 13 % 241) as u8, ((x + y) % 256) as u8]).unwrap()
}

pub fn write_png(dir: &Path, name: &str, img: &RasterImage) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, encode_png(img).unwrap()).unwrap();
    path
}

pub fn entry(id: &str, turn: u32, caller: Caller, variant: Option<&str>, response: &str) -> ScriptEntry {
    ScriptEntry {
        key: ScriptKey {
            sample_id: id.into(),
            turn,
            caller,
            rollout: None,
            variant: variant.map(String::from),
        },
        response: response.into(),
    }
}

pub fn policy(id: &str, turn: u32, response: &str) -> ScriptEntry {
    entry(id, turn, Caller::Policy, None, response)
}

pub fn reward(id: &str, response: &str) -> ScriptEntry {
    entry(id, 1, Caller::Reward, None, response)
}

pub fn scripted(entries: Vec<ScriptEntry>) -> ScriptedBackend {
    ScriptedBackend::new(entries).unwrap()
}

/// Decodes the image actually carried by a message part.
pub fn decode_part(part: &ImagePart) -> RasterImage {
    let b64 = part.data_uri.strip_prefix("data:image/png;base64,").expect("png data uri");
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).unwrap();
    decode_bytes(&bytes, "part").unwrap()
}

pub fn message_images(messages: &[ChatMessage]) -> Vec<RasterImage> {
    messages.iter().flat_map(|m| m.images()).map(decode_part).collect()
}

/// An in-memory sample whose image lives at `image`.
pub fn sample(id: &str, image: PathBuf, s: CoordSpace, answer: &str, boxes: &[[i64; 4]]) -> Sample {
    Sample {
        id: id.into(),
        image,
        question: format!("Question for {id}?"),
        gt_answer: answer.into(),
        options: None,
        gt_boxes: boxes.iter().map(|b| bbox(*b, s)).collect(),
        space: s,
    }
}

pub fn dataset(samples: Vec<Sample>) -> Dataset {
    Dataset {
        samples,
        warnings: Vec::new(),
    }
}
