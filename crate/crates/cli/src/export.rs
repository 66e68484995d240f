//! Binary PPM images and the tab-separated dataset index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use sdanet_core::data::Sample;
use sdanet_core::Tensor;

/// Quantizes a `[3,H,W]` image in `[0,1]` to a binary (P6) pixel map.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else { bail!("expected a [3,H,W] image, got {:?}", image.shape()) };
    ensure!(c == 3, "PPM needs 3 channels, got {c}");
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Parses a P6 map with maxval 255 back into `[3,H,W]` floats.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, "truncated PPM header");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    pos += 1;
    ensure!(fields[0] == "P6", "not a binary PPM");
    let (w, h, max): (usize, usize, usize) = (fields[1].parse()?, fields[2].parse()?, fields[3].parse()?);
    ensure!(max == 255, "only 8-bit maps are supported");
    let px = &bytes.get(pos..).context("truncated PPM")?;
    ensure!(px.len() == 3 * w * h, "PPM body has {} bytes, expected {}", px.len(), 3 * w * h);
    let mut data = vec![0f32; 3 * w * h];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + i] = px[3 * i + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Writes one PPM per sample plus `index.tsv` with the columns
/// filename, class_id, plate_id, position. Unplated samples have plate id `-`.
pub fn export_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = match s.plate_id {
            Some(p) => format!("p{p:05}_{:02}.ppm", s.position),
            None => format!("{i:06}.ppm"),
        };
        fs::write(dir.join(&name), encode_ppm(&s.image)?).with_context(|| format!("writing {name}"))?;
        let plate = s.plate_id.map_or_else(|| "-".to_string(), |p| p.to_string());
        writeln!(index, "{name}\t{}\t{plate}\t{}", s.label, s.position)?;
    }
    fs::write(dir.join("index.tsv"), index)?;
    Ok(())
}

/// One parsed index row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRow {
    pub filename: String,
    pub class_id: usize,
    pub plate_id: Option<usize>,
    pub position: usize,
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            ensure!(f.len() == 4, "index row {line:?} does not have 4 columns");
            Ok(IndexRow {
                filename: f[0].to_string(),
                class_id: f[1].parse()?,
                plate_id: if f[2] == "-" { None } else { Some(f[2].parse()?) },
                position: f[3].parse()?,
            })
        })
        .collect()
}
