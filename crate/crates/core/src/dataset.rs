//! On-disk datasets: `NNNNNN.ppm` images, `NNNNNN.json` sidecars and `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TextBox;
use crate::recognition::Alphabet;
use crate::synth::{generate_document, sample_seed, DocumentSample, GenConfig};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

/// Encodes an `H x W x 3` image in `[0, 1]` as binary 8-bit PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Shape(format!("ppm needs H x W x 3, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Dataset("truncated ppm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Dataset(format!("expected binary ppm (P6), found `{}`", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Dataset(format!("bad ppm header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 || w == 0 || h == 0 {
        return Err(Error::Dataset(format!("unsupported ppm {w}x{h} with maxval {max}")));
    }
    let n = w * h * 3;
    let body = bytes.get(pos..pos + n).ok_or_else(|| Error::Dataset("truncated ppm pixel data".into()))?;
    Tensor::new(vec![h, w, 3], body.iter().map(|&b| b as f64 / max as f64).collect())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| match e {
        Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// One ground-truth line as stored in a sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
    pub transcript: String,
    pub char_centers: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub boxes: Vec<SidecarBox>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lines_requested: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub config: GenConfig,
    pub alphabet: String,
    /// Lines that could not be placed, summed over the dataset.
    pub lines_dropped: usize,
}

/// An image with its ground truth, loaded into memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub boxes: Vec<TextBox>,
    pub char_centers: Vec<Vec<(f64, f64)>>,
}

impl Sample {
    pub fn from_document(name: impl Into<String>, doc: DocumentSample) -> Self {
        Sample {
            name: name.into(),
            image: doc.image,
            boxes: doc.boxes,
            char_centers: doc.char_centers,
        }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            boxes: self
                .boxes
                .iter()
                .zip(&self.char_centers)
                .map(|(b, c)| SidecarBox {
                    cx: b.cx,
                    cy: b.cy,
                    w: b.w,
                    h: b.h,
                    theta_deg: b.theta.to_degrees(),
                    transcript: b.transcript.clone().unwrap_or_default(),
                    char_centers: c.iter().map(|&(x, y)| [x, y]).collect(),
                })
                .collect(),
            seed: None,
            lines_requested: None,
        }
    }
}

fn sidecar_boxes(sc: &Sidecar) -> Result<(Vec<TextBox>, Vec<Vec<(f64, f64)>>)> {
    let mut boxes = Vec::with_capacity(sc.boxes.len());
    let mut centers = Vec::with_capacity(sc.boxes.len());
    for b in &sc.boxes {
        let tb = TextBox::new(b.cx, b.cy, b.w, b.h)
            .with_theta(b.theta_deg.to_radians())
            .with_transcript(b.transcript.clone());
        if !tb.is_valid() {
            return Err(Error::Dataset(format!("invalid box {b:?}")));
        }
        boxes.push(tb);
        centers.push(b.char_centers.iter().map(|p| (p[0], p[1])).collect());
    }
    Ok((boxes, centers))
}

pub fn sample_name(index: usize) -> String {
    format!("{index:06}")
}

/// Generates `count` documents into `dir` and writes the manifest.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, cfg: &GenConfig, alphabet: &Alphabet) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dropped: Vec<usize> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let s = sample_seed(seed, i as u64);
            let doc = generate_document(cfg, alphabet, s)?;
            let lost = doc.lines_requested - doc.boxes.len();
            let requested = doc.lines_requested;
            let name = sample_name(i);
            let sample = Sample::from_document(name.clone(), doc);
            let mut sc = sample.sidecar();
            sc.seed = Some(s);
            sc.lines_requested = Some(requested);
            write_ppm(&dir.join(format!("{name}.ppm")), &sample.image)?;
            write_json(&dir.join(format!("{name}.json")), &sc)?;
            Ok(lost)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        count,
        seed,
        config: cfg.clone(),
        alphabet: alphabet.tokens().iter().collect(),
        lines_dropped: dropped.iter().sum(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

/// A dataset directory: its manifest and in-memory samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        let samples = (0..manifest.count)
            .into_par_iter()
            .map(|i| load_sample(dir, &sample_name(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.manifest.alphabet.chars().collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn load_sample(dir: &Path, name: &str) -> Result<Sample> {
    let image = read_ppm(&dir.join(format!("{name}.ppm")))?;
    let sc: Sidecar = read_json(&dir.join(format!("{name}.json")))?;
    let (boxes, char_centers) = sidecar_boxes(&sc)?;
    Ok(Sample {
        name: name.to_string(),
        image,
        boxes,
        char_centers,
    })
}
