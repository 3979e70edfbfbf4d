//! Plain-text checkpoints.
//!
//! ```text
//! AODNET-CKPT v1 multiscale
//! layer conv1 3 3 1 1
//! <Cout·Cin·Kh·Kw weights>
//! <Cout biases>
//! layer conv2 3 3 3 3
//! ...
//! ```
//!
//! Scalars are printed with 17 significant digits so every `f64` survives
//! the round trip. A trailing `final-relu=off` token on the header records
//! a model trained without the output ReLU.

use std::path::Path;

use super::{AodNetParams, ArchVariant, LAYER_NAMES};
use crate::error::{Error, Result};
use crate::io::format_real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "AODNET-CKPT";
const VERSION: &str = "v1";

pub fn save_checkpoint(params: &AodNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{CHECKPOINT_MAGIC} {VERSION} {}", params.variant().name());
    if !params.final_relu {
        out.push_str(" final-relu=off");
    }
    out.push('\n');
    for (i, spec) in params.variant().layer_specs().iter().enumerate() {
        let [co, ci, kh, kw] = spec.weight_shape();
        out.push_str(&format!("layer {} {co} {ci} {kh} {kw}\n", LAYER_NAMES[i]));
        for t in [params.weights(i), params.bias(i)] {
            let line: Vec<String> = t.data().iter().map(|&v| format_real(v)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint of whichever variant its header names.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AodNetParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

/// Loads a checkpoint and fails unless it holds the `expected` variant.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: ArchVariant) -> Result<AodNetParams> {
    let params = load_checkpoint(path.as_ref())?;
    if params.variant() != expected {
        return Err(Error::shape(
            "load_checkpoint",
            format!(
                "{} holds a {} model, expected {}",
                path.as_ref().display(),
                params.variant(),
                expected
            ),
        ));
    }
    Ok(params)
}

fn parse(text: &str, origin: &str) -> Result<AodNetParams> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();

    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file, expected checkpoint header".into()))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() < 3 || head[0] != CHECKPOINT_MAGIC || head[1] != VERSION {
        return Err(err(
            1,
            format!("expected `{CHECKPOINT_MAGIC} {VERSION} <variant>`, found {header:?}"),
        ));
    }
    let variant = ArchVariant::parse(head[2])
        .ok_or_else(|| err(1, format!("unknown variant {:?}", head[2])))?;
    let mut final_relu = true;
    for extra in &head[3..] {
        match *extra {
            "final-relu=off" => final_relu = false,
            "final-relu=on" => final_relu = true,
            other => return Err(err(1, format!("unknown header option {other:?}"))),
        }
    }

    let mut tensors = Vec::with_capacity(10);
    for (i, spec) in variant.layer_specs().iter().enumerate() {
        let name = LAYER_NAMES[i];
        let (line_no, line) = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some(found) => break found,
                None => {
                    return Err(err(
                        text.lines().count() + 1,
                        format!("missing layer {name}"),
                    ))
                }
            }
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 || fields[0] != "layer" {
            return Err(err(
                line_no,
                format!("expected `layer {name} <Cout> <Cin> <Kh> <Kw>`, found {line:?}"),
            ));
        }
        if fields[1] != name {
            return Err(err(line_no, format!("expected layer {name}, found {}", fields[1])));
        }
        let dims: Vec<usize> = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| err(line_no, format!("layer {name}: bad dimension {f:?}")))
            })
            .collect::<Result<_>>()?;
        if dims != spec.weight_shape() {
            return Err(err(
                line_no,
                format!(
                    "layer {name}: shape {dims:?} does not match the {variant} architecture {:?}",
                    spec.weight_shape()
                ),
            ));
        }

        let needed = spec.param_count();
        let mut values = Vec::with_capacity(needed);
        let mut last_line = line_no;
        while values.len() < needed {
            match lines.peek() {
                Some((_, l)) if l.trim_start().starts_with("layer") => break,
                Some(_) => {
                    let (n, l) = lines.next().expect("peeked");
                    last_line = n;
                    for tok in l.split_whitespace() {
                        let v: f64 = tok
                            .parse()
                            .map_err(|_| err(n, format!("layer {name}: non-numeric token {tok:?}")))?;
                        if !v.is_finite() {
                            return Err(err(n, format!("layer {name}: non-finite value {tok}")));
                        }
                        values.push(v);
                    }
                }
                None => break,
            }
        }
        if values.len() != needed {
            return Err(err(
                last_line,
                format!(
                    "layer {name}: expected {needed} values, found {}",
                    values.len()
                ),
            ));
        }
        let bias = values.split_off(spec.weight_count());
        tensors.push(Tensor::new(spec.weight_shape(), values)?);
        tensors.push(Tensor::new([1, spec.out_channels, 1, 1], bias)?);
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(err(n, format!("unexpected trailing content {l:?}")));
    }

    let mut params = AodNetParams::from_tensors(variant, tensors)?;
    params.final_relu = final_relu;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn roundtrip(params: &AodNetParams) -> AodNetParams {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(params, &p).unwrap();
        load_checkpoint(&p).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for (seed, variant) in [(1, ArchVariant::MultiScale), (2, ArchVariant::Plain)] {
            let mut p = init_params(seed, 0.7, variant).unwrap();
            for (i, t) in p.tensors_mut().iter_mut().enumerate() {
                if i % 2 == 1 {
                    for (j, v) in t.data_mut().iter_mut().enumerate() {
                        *v = (j as f64 + 0.1) / 3.0 - 1e-300 * i as f64;
                    }
                }
            }
            assert_eq!(roundtrip(&p), p);
        }
        let mut linear = init_params(3, 0.1, ArchVariant::MultiScale).unwrap();
        linear.final_relu = false;
        assert!(!roundtrip(&linear).final_relu);
    }

    #[test]
    fn truncated_file_names_missing_layer() {
        let p = init_params(1, 0.1, ArchVariant::MultiScale).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: String = text.lines().take(7).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, cut).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("missing layer conv3"), "{msg}");

        let cut: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, cut).unwrap();
        let msg = load_checkpoint(&path).unwrap_err().to_string();
        assert!(msg.contains("layer conv3: expected 453 values, found 450"), "{msg}");
    }

    #[test]
    fn malformed_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, "NOT-A-CKPT v1 multiscale\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { line: 1, .. })));

        let p = init_params(1, 0.1, ArchVariant::MultiScale).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bad = text.replacen("layer conv2 3 3 3 3", "layer conv2 3 3 5 5", 1);
        std::fs::write(&path, bad).unwrap();
        let e = load_checkpoint(&path);
        assert!(matches!(e, Err(Error::Parse { line: 5, .. })), "{e:?}");

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen(' ', " abc ", 1);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("non-numeric"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn plain_checkpoint_refuses_multiscale_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ckpt");
        save_checkpoint(&init_params(1, 0.1, ArchVariant::Plain).unwrap(), &path).unwrap();
        assert!(matches!(
            load_checkpoint_as(&path, ArchVariant::MultiScale),
            Err(Error::Shape { .. })
        ));
        // Relabelling the header does not sneak plain shapes past the parser.
        let text = std::fs::read_to_string(&path).unwrap().replacen("plain", "multiscale", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
    }
}
