use std::fmt;
use std::str::FromStr;

use super::FrError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    /// Square kernel `k`, zero padding `k / 2`.
    Conv { k: usize, stride: usize, out: usize },
    Relu,
    GlobalAvgPool,
    /// Flattens its input first.
    Dense { out: usize },
}

/// Network shape: a square `input x input x channels` input followed by a
/// layer sequence. Written as e.g. `32x3:c3s1x8-relu-gap-d32`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    pub input: usize,
    pub channels: usize,
    pub layers: Vec<Layer>,
}

/// Parameter tensor shapes of one layer.
pub(crate) fn layer_param_shapes(layer: &Layer, in_shape: &[usize]) -> Vec<Vec<usize>> {
    match *layer {
        Layer::Conv { k, out, .. } => vec![vec![k, k, in_shape[2], out], vec![out]],
        Layer::Dense { out } => vec![vec![in_shape.iter().product(), out], vec![out]],
        Layer::Relu | Layer::GlobalAvgPool => vec![],
    }
}

pub(crate) fn layer_out_shape(layer: &Layer, in_shape: &[usize]) -> Vec<usize> {
    match *layer {
        Layer::Conv { k, stride, out } => {
            let pad = k / 2;
            let f = |n: usize| (n + 2 * pad - k) / stride + 1;
            vec![f(in_shape[0]), f(in_shape[1]), out]
        }
        Layer::Dense { out } => vec![out],
        Layer::Relu => in_shape.to_vec(),
        Layer::GlobalAvgPool => vec![in_shape[2]],
    }
}

impl Arch {
    /// Per-layer activation shapes, starting with the input.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![self.input, self.input, self.channels]];
        for layer in &self.layers {
            let next = layer_out_shape(layer, shapes.last().unwrap());
            shapes.push(next);
        }
        shapes
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let shapes = self.shapes();
        self.layers
            .iter()
            .zip(&shapes)
            .flat_map(|(l, s)| layer_param_shapes(l, s))
            .collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.shapes().last().unwrap().iter().product()
    }

    fn validate(&self) -> Result<(), String> {
        if self.input == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(format!("bad input {}x{}", self.input, self.channels));
        }
        let mut shape = vec![self.input, self.input, self.channels];
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Conv { k, stride, out } => {
                    if shape.len() != 3 || k == 0 || k % 2 == 0 || stride == 0 || out == 0 {
                        return Err(format!("layer {i}: invalid conv"));
                    }
                    if shape[0] + 2 * (k / 2) < k {
                        return Err(format!("layer {i}: conv larger than input"));
                    }
                }
                Layer::GlobalAvgPool if shape.len() != 3 => {
                    return Err(format!("layer {i}: pooling needs a spatial input"));
                }
                Layer::Dense { out: 0 } => return Err(format!("layer {i}: empty dense")),
                _ => {}
            }
            shape = layer_out_shape(layer, &shape);
        }
        if !matches!(self.layers.last(), Some(Layer::Dense { .. })) {
            return Err("last layer must be dense".into());
        }
        Ok(())
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}:", self.input, self.channels)?;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            match layer {
                Layer::Conv { k, stride, out } => write!(f, "c{k}s{stride}x{out}")?,
                Layer::Relu => f.write_str("relu")?,
                Layer::GlobalAvgPool => f.write_str("gap")?,
                Layer::Dense { out } => write!(f, "d{out}")?,
            }
        }
        Ok(())
    }
}

fn parse_layer(tok: &str) -> Option<Layer> {
    match tok {
        "relu" => return Some(Layer::Relu),
        "gap" => return Some(Layer::GlobalAvgPool),
        _ => {}
    }
    if let Some(rest) = tok.strip_prefix('d') {
        return rest.parse().ok().map(|out| Layer::Dense { out });
    }
    let rest = tok.strip_prefix('c')?;
    let (k, rest) = rest.split_once('s')?;
    let (stride, out) = rest.split_once('x')?;
    Some(Layer::Conv {
        k: k.parse().ok()?,
        stride: stride.parse().ok()?,
        out: out.parse().ok()?,
    })
}

impl FromStr for Arch {
    type Err = FrError;

    fn from_str(s: &str) -> Result<Self, FrError> {
        let bad = |why: String| FrError::Arch(format!("{s:?}: {why}"));
        let (head, body) = s.split_once(':').ok_or_else(|| bad("missing ':'".into()))?;
        let (input, channels) = head
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| bad(format!("bad input spec {head:?}")))?;
        let layers = body
            .split('-')
            .map(|t| parse_layer(t).ok_or_else(|| bad(format!("unknown layer {t:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let arch = Arch {
            input,
            channels,
            layers,
        };
        arch.validate().map_err(bad)?;
        Ok(arch)
    }
}

/// Three 3x3 conv stages on the full 32 px crop, pooled globally.
pub const ARCH_FINE: &str = "32x3:c3s1x32-relu-c3s2x64-relu-c3s2x64-relu-gap-d32";
/// The same stages on a crop downsized to 24 px.
pub const ARCH_COARSE: &str = "24x3:c3s1x32-relu-c3s2x64-relu-c3s2x64-relu-gap-d32";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_roundtrip() {
        for s in [ARCH_FINE, ARCH_COARSE, "8x1:c3s1x4-relu-d64-relu-d8"] {
            let a: Arch = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
    }

    #[test]
    fn shapes_follow_layers() {
        let a: Arch = ARCH_FINE.parse().unwrap();
        assert_eq!(a.shapes()[2], vec![32, 32, 32]);
        assert_eq!(a.shapes()[3], vec![16, 16, 64]);
        assert_eq!(a.shapes()[5], vec![8, 8, 64]);
        assert_eq!(a.shapes()[7], vec![64]);
        assert_eq!(a.embedding_dim(), 32);
        let b: Arch = ARCH_COARSE.parse().unwrap();
        assert_eq!(b.shapes()[1], vec![24, 24, 32]);
        let d: Arch = "8x1:c3s2x4-relu-d64-relu-d8".parse().unwrap();
        assert_eq!(d.param_shapes()[2], vec![4 * 4 * 4, 64]);
    }

    #[test]
    fn malformed_descriptors_rejected() {
        for s in ["32x3", "32x3:c3s1x8-relu", "32x3:c4s1x8-d4", "32x2:d4", "32x3:q-d4", "32x3:d4-gap-d4"] {
            assert!(s.parse::<Arch>().is_err(), "{s}");
        }
    }
}
