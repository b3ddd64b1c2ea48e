//! On-disk dataset layout:
//! ```text
//! out/
//!   index.txt          one line per image: `id width height n_instances`
//!   images/NNNN.ppm    binary P6, maxval 255
//!   masks/NNNN.rle     line 1: `w h n`; then per instance a header line
//!                      `kind x0 y0 x1 y1` and a line of RLE counts
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use super::rle::{rle_decode, rle_encode};
use super::synth::{Instance, ShapeKind, SyntheticScene};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn write_dataset(dir: &Path, scenes: &[SyntheticScene]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut index = String::new();
    for (i, scene) in scenes.iter().enumerate() {
        let size = scene.image.shape()[1];
        writeln!(index, "{i:04} {size} {size} {}", scene.instances.len())
            .expect("write to string");
        write_ppm(&dir.join(format!("images/{i:04}.ppm")), &scene.image)?;
        let mut text = format!("{size} {size} {}\n", scene.instances.len());
        for inst in &scene.instances {
            let (x0, y0, x1, y1) = inst.bbox;
            writeln!(text, "{} {x0} {y0} {x1} {y1}", inst.kind.tag()).expect("write to string");
            let counts = rle_encode(&inst.mask);
            let line = counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(text, "{line}").expect("write to string");
        }
        std::fs::write(dir.join(format!("masks/{i:04}.rle")), text)?;
    }
    std::fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticScene>> {
    let index = std::fs::read_to_string(dir.join("index.txt"))?;
    let mut scenes = Vec::new();
    for line in index.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Invalid(format!("malformed index line `{line}`")));
        }
        let id = parts[0];
        let image = read_ppm(&dir.join(format!("images/{id}.ppm")))?;
        let instances = read_masks(&dir.join(format!("masks/{id}.rle")))?;
        scenes.push(SyntheticScene { image, instances });
    }
    Ok(scenes)
}

fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[(c * h + y) * w + x];
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    // Header: three whitespace-separated tokens after P6.
    let header_err = || Error::Invalid(format!("{}: malformed ppm header", path.display()));
    let mut pos = 0usize;
    let token = |data: &[u8], pos: &mut usize| -> Result<String> {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(header_err());
        }
        Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
    };
    if token(&data, &mut pos)? != "P6" {
        return Err(header_err());
    }
    let w: usize = token(&data, &mut pos)?.parse().map_err(|_| header_err())?;
    let h: usize = token(&data, &mut pos)?.parse().map_err(|_| header_err())?;
    let maxval: usize = token(&data, &mut pos)?.parse().map_err(|_| header_err())?;
    if maxval != 255 {
        return Err(Error::Invalid("ppm maxval must be 255".into()));
    }
    pos += 1; // single whitespace after maxval
    if data.len() < pos + 3 * w * h {
        return Err(Error::Invalid(format!("{}: truncated ppm", path.display())));
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.data_mut()[(c * h + y) * w + x] =
                    data[pos + (y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

fn read_masks(path: &Path) -> Result<Vec<Instance>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let mut next_line = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Invalid(format!("{}: truncated mask file", path.display())))?
            .map_err(Error::Io)
    };
    let head = next_line()?;
    let parts: Vec<usize> = head
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| Error::Invalid(format!("bad mask header `{head}`"))))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Invalid(format!("bad mask header `{head}`")));
    }
    let (w, h, n) = (parts[0], parts[1], parts[2]);
    let mut instances = Vec::with_capacity(n);
    for _ in 0..n {
        let meta = next_line()?;
        let mp: Vec<&str> = meta.split_whitespace().collect();
        if mp.len() != 5 {
            return Err(Error::Invalid(format!("bad instance header `{meta}`")));
        }
        let kind = ShapeKind::from_tag(mp[0])?;
        let nums: Vec<usize> = mp[1..]
            .iter()
            .map(|p| p.parse().map_err(|_| Error::Invalid(format!("bad box in `{meta}`"))))
            .collect::<Result<_>>()?;
        let counts_line = next_line()?;
        let counts: Vec<usize> = counts_line
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| Error::Invalid("bad rle count".into())))
            .collect::<Result<_>>()?;
        let mask = rle_decode(&counts, w, h)?;
        instances.push(Instance {
            mask,
            bbox: (nums[0], nums[1], nums[2], nums[3]),
            kind,
        });
    }
    Ok(instances)
}
