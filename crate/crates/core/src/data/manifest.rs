use std::collections::HashSet;
use std::path::Path;

use super::image::{load_pgm, resize_bilinear};
use super::{BBox, GtBox, Sample};
use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["path", "labels", "boxes"];

/// One manifest row: image path, class indices and optional boxes in
/// source-image pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub labels: Vec<usize>,
    pub boxes: Vec<GtBox>,
}

fn parse_labels(field: &str) -> std::result::Result<Vec<usize>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|t| t.trim().parse().map_err(|_| format!("bad label {t:?}")))
        .collect()
}

fn parse_boxes(field: &str) -> std::result::Result<Vec<GtBox>, String> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|t| {
            let parts: Vec<usize> = t
                .split(':')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format!("bad box {t:?}; expected c:x:y:w:h"))?;
            match parts[..] {
                [class, x, y, w, h] if w >= 1 && h >= 1 => Ok(GtBox {
                    class,
                    bbox: BBox::new(x, y, w, h),
                }),
                [_, _, _, _, _] => Err(format!("box {t:?} has zero extent")),
                _ => Err(format!("bad box {t:?}; expected c:x:y:w:h")),
            }
        })
        .collect()
}

/// Parses manifest CSV text; `origin` names the source in error messages.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(parse_err(1, format!("header must be {}", HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let path = record[0].trim();
        if path.is_empty() {
            return Err(parse_err(line, "empty path".into()));
        }
        let labels = parse_labels(record[1].trim()).map_err(|m| parse_err(line, m))?;
        let boxes = parse_boxes(record[2].trim()).map_err(|m| parse_err(line, m))?;
        entries.push(ManifestEntry {
            path: path.to_string(),
            labels,
            boxes,
        });
    }
    for dup in duplicate_paths(&entries) {
        log::warn!("{origin}: duplicate manifest path {dup}");
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read manifest {}: {e}", path.display())))?;
    parse_manifest(&text, &path.display().to_string())
}

/// Paths occurring more than once, in order of their second occurrence.
pub fn duplicate_paths(entries: &[ManifestEntry]) -> Vec<String> {
    let mut seen = HashSet::new();
    entries
        .iter()
        .filter(|e| !seen.insert(e.path.as_str()))
        .map(|e| e.path.clone())
        .collect()
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

pub fn render_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::Format(e.to_string());
    writer.write_record(HEADER).map_err(write_err)?;
    for e in entries {
        let labels = join(&e.labels, |l| l.to_string());
        let boxes = join(&e.boxes, |b| {
            format!("{}:{}:{}:{}:{}", b.class, b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h)
        });
        writer
            .write_record([e.path.as_str(), &labels, &boxes])
            .map_err(write_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    std::fs::write(path, render_manifest(entries)?)?;
    Ok(())
}

/// Loads every manifest image relative to `root`, resizing to
/// `input_size x input_size` when needed and scaling boxes to match.
pub fn load_samples(
    entries: &[ManifestEntry],
    root: &Path,
    n_classes: usize,
    input_size: usize,
) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let img = load_pgm(&root.join(&e.path))?;
            for &l in e.labels.iter().chain(e.boxes.iter().map(|b| &b.class)) {
                if l >= n_classes {
                    return Err(Error::InvalidArgument(format!(
                        "{}: class {l} out of range for {n_classes} classes",
                        e.path
                    )));
                }
            }
            if let Some(b) = e.boxes.iter().find(|b| !b.bbox.fits(img.width, img.height)) {
                return Err(Error::InvalidArgument(format!(
                    "{}: box {:?} exceeds the {}x{} image",
                    e.path, b.bbox, img.width, img.height
                )));
            }
            let (sw, sh) = (img.width, img.height);
            let image = if (sw, sh) == (input_size, input_size) {
                img
            } else {
                log::info!("{}: resizing {sw}x{sh} to {input_size}x{input_size}", e.path);
                resize_bilinear(&img, input_size, input_size)?
            };
            let scale = |v: usize, from: usize| v * input_size / from;
            let boxes = e
                .boxes
                .iter()
                .map(|b| {
                    let x = scale(b.bbox.x, sw);
                    let y = scale(b.bbox.y, sh);
                    let right = scale(b.bbox.right(), sw).max(x + 1).min(input_size);
                    let bottom = scale(b.bbox.bottom(), sh).max(y + 1).min(input_size);
                    GtBox {
                        class: b.class,
                        bbox: BBox::new(x.min(input_size - 1), y.min(input_size - 1), right - x, bottom - y),
                    }
                })
                .collect();
            let mut labels = e.labels.clone();
            labels.sort_unstable();
            labels.dedup();
            Ok(Sample { image, labels, boxes })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE_ROWS: &str =
        "path,labels,boxes\nimg/a.pgm,2;5,\nimg/b.pgm,,0:10:20:30:40\nimg/c.pgm,0;1,0:1:2:3:4;1:5:6:7:8\n";

    #[test]
    fn grammar_examples() {
        let e = parse_manifest(THREE_ROWS, "m.csv").unwrap();
        assert_eq!(e[0].labels, vec![2, 5]);
        assert!(e[0].boxes.is_empty());
        assert!(e[1].labels.is_empty());
        assert_eq!(
            e[1].boxes,
            vec![GtBox {
                class: 0,
                bbox: BBox::new(10, 20, 30, 40)
            }]
        );
        assert_eq!(e[2].boxes.len(), 2);
    }

    #[test]
    fn three_rows_round_trip() {
        let e = parse_manifest(THREE_ROWS, "m.csv").unwrap();
        assert_eq!(render_manifest(&e).unwrap(), THREE_ROWS);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "path,labels,boxes\na.pgm,1,\nb.pgm,x,\n";
        match parse_manifest(text, "m.csv").unwrap_err() {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("label"), "{msg}");
            }
            e => panic!("{e}"),
        }
        let bad_box = "path,labels,boxes\na.pgm,1,0:1:2\n";
        assert!(matches!(
            parse_manifest(bad_box, "m").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        let short = "path,labels,boxes\na.pgm,1\n";
        assert!(matches!(
            parse_manifest(short, "m").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(parse_manifest("file,labels,boxes\n", "m").is_err());
    }

    #[test]
    fn duplicates_are_reported_not_rejected() {
        let text = "path,labels,boxes\na.pgm,1,\nb.pgm,,\na.pgm,0,\n";
        let e = parse_manifest(text, "m").unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(duplicate_paths(&e), vec!["a.pgm".to_string()]);
    }
}
