//! Layer tables: the built-in ResNet-50 table and CSV files with header
//! `id,C,K,H,W,R,S,stride[,pad_h,pad_w]`.

use std::io::Read;
use std::path::Path;

use dconv_core::{ConvLayerSpec, RESNET50_LAYERS};

use crate::error::{DconvError, Result};

/// A numbered layer; the minibatch of `spec` is 1 until the caller sets it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerEntry {
    pub id: usize,
    pub spec: ConvLayerSpec,
}

pub fn resnet50() -> Vec<LayerEntry> {
    RESNET50_LAYERS
        .iter()
        .map(|&(id, c, k, h, w, r, s, stride)| LayerEntry { id, spec: ConvLayerSpec::new(1, c, k, h, w, r, s, stride) })
        .collect()
}

pub fn parse_layer_file(path: &Path) -> Result<Vec<LayerEntry>> {
    parse_layers(std::fs::File::open(path)?)
}

const COLUMNS: [&str; 10] = ["id", "c", "k", "h", "w", "r", "s", "stride", "pad_h", "pad_w"];

/// Parses a layer table. Missing pads default to `(R-1)/2`, `(S-1)/2`.
pub fn parse_layers(source: impl Read) -> Result<Vec<LayerEntry>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).comment(Some(b'#')).from_reader(source);
    let parse_error = |line: u64, message: String| DconvError::Parse { line: line as usize, message };
    let headers = reader.headers().map_err(|e| parse_error(1, e.to_string()))?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names.is_empty() || names.iter().all(|n| n.is_empty()) {
        return Err(parse_error(1, "empty layer file".into()));
    }
    if !(names.len() == 8 || names.len() == 10) || names.iter().zip(COLUMNS).any(|(n, want)| n != want) {
        return Err(parse_error(1, format!("expected header id,C,K,H,W,R,S,stride[,pad_h,pad_w], found {}", names.join(","))));
    }

    let mut layers = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != names.len() {
            return Err(parse_error(line, format!("expected {} fields, found {}", names.len(), record.len())));
        }
        let mut values = [0usize; 10];
        for (i, field) in record.iter().enumerate() {
            values[i] = field.parse().map_err(|_| parse_error(line, format!("{} is not a non-negative integer: {field:?}", COLUMNS[i])))?;
        }
        let [id, c, k, h, w, r, s, stride, pad_h, pad_w] = values;
        let mut spec = ConvLayerSpec::new(1, c, k, h, w, r, s, stride);
        if names.len() == 10 {
            spec = spec.with_padding(pad_h, pad_w);
        }
        spec.validate().map_err(|e| parse_error(line, e.to_string()))?;
        layers.push(LayerEntry { id, spec });
    }
    if layers.is_empty() {
        return Err(parse_error(1, "layer file has no rows".into()));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table_rows() {
        let table = resnet50();
        assert_eq!(table.len(), 20);
        let l4 = table[3].spec;
        assert_eq!((l4.c, l4.k, l4.h, l4.w, l4.r, l4.s, l4.stride), (64, 64, 56, 56, 3, 3, 1));
        let l16 = table[15].spec;
        assert_eq!((table[15].id, l16.c, l16.k, l16.h, l16.r, l16.stride), (16, 1024, 2048, 14, 1, 2));
    }

    #[test]
    fn parses_optional_padding() {
        let text = "id,C,K,H,W,R,S,stride\n4,64,64,56,56,3,3,1\n";
        let layers = parse_layers(text.as_bytes()).unwrap();
        assert_eq!(layers[0].spec.pad_h, 1);
        let text = "id,C,K,H,W,R,S,stride,pad_h,pad_w\n# comment\n7, 3, 8, 9, 9, 3, 3, 2, 0, 0\n";
        let layers = parse_layers(text.as_bytes()).unwrap();
        assert_eq!((layers[0].id, layers[0].spec.pad_w, layers[0].spec.p()), (7, 0, 4));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(parse_layers("".as_bytes()), Err(DconvError::Parse { line: 1, .. })));
        assert!(matches!(parse_layers("id,C,K,H,W,R,S,stride\n".as_bytes()), Err(DconvError::Parse { line: 1, .. })));
        let bad = "id,C,K,H,W,R,S,stride\n1,3,64,224,224,7,7,2\n2,64,x,56,56,1,1,1\n";
        assert!(matches!(parse_layers(bad.as_bytes()), Err(DconvError::Parse { line: 3, .. })));
        let short = "id,C,K,H,W,R,S,stride\n1,3,64\n";
        assert!(matches!(parse_layers(short.as_bytes()), Err(DconvError::Parse { line: 2, .. })));
        let zero = "id,C,K,H,W,R,S,stride\n1,3,64,224,224,7,7,0\n";
        assert!(matches!(parse_layers(zero.as_bytes()), Err(DconvError::Parse { line: 2, .. })));
        assert!(matches!(parse_layers("a,b\n1,2\n".as_bytes()), Err(DconvError::Parse { line: 1, .. })));
    }
}
