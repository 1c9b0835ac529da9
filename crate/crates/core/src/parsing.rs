//! Body-part label sets, segmentation maps and the foreground/garment masks.

use std::path::Path;

use cascade_autograd::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_png, write_png};

/// The 18 ATR human-parsing labels, in index order.
pub const ATR_LABELS: [&str; 18] = [
    "background",
    "hat",
    "hair",
    "sunglasses",
    "upper clothes",
    "skirt",
    "pants",
    "dress",
    "belt",
    "left shoe",
    "right shoe",
    "face",
    "left leg",
    "right leg",
    "left arm",
    "right arm",
    "bag",
    "scarf",
];

/// Default garment subset: upper clothes, skirt, pants, dress, belt, scarf.
pub const ATR_GARMENTS: [usize; 6] = [4, 5, 6, 7, 8, 17];

const SKIN_LABELS: [&str; 6] = ["hair", "face", "left leg", "right leg", "left arm", "right arm"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
    garment: Vec<usize>,
    background: usize,
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::atr()
    }
}

impl LabelSet {
    pub fn atr() -> Self {
        Self::new(ATR_LABELS.iter().map(|s| s.to_string()).collect(), ATR_GARMENTS.to_vec(), 0)
            .expect("ATR label set is valid")
    }

    pub fn new(names: Vec<String>, mut garment: Vec<usize>, background: usize) -> Result<Self> {
        let j = names.len();
        if !(2..=256).contains(&j) {
            return Err(Error::Config(format!("label set needs 2..=256 names, got {j}")));
        }
        if background >= j {
            return Err(Error::Config(format!("background index {background} out of range for {j} labels")));
        }
        garment.sort_unstable();
        garment.dedup();
        for &g in &garment {
            if g >= j {
                return Err(Error::Config(format!("garment label {g} out of range for {j} labels")));
            }
            if g == background {
                return Err(Error::Config("background cannot be a garment label".into()));
            }
            if SKIN_LABELS.contains(&names[g].as_str()) {
                return Err(Error::Config(format!("'{}' is a body label, not a garment", names[g])));
            }
        }
        Ok(Self { names, garment, background })
    }

    /// Text format: one label name per line in index order, plus optional
    /// `@garment i j ...` and `@background i` directives. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut garment = None;
        let mut background = 0;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let ints = |rest: &str| -> Result<Vec<usize>> {
                rest.split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Config(format!("bad label index '{t}'"))))
                    .collect()
            };
            if let Some(rest) = line.strip_prefix("@garment") {
                garment = Some(ints(rest)?);
            } else if let Some(rest) = line.strip_prefix("@background") {
                background = *ints(rest)?.first().ok_or_else(|| Error::Config("@background needs an index".into()))?;
            } else {
                names.push(line.to_string());
            }
        }
        Self::new(names, garment.unwrap_or_else(|| ATR_GARMENTS.to_vec()), background)
    }

    /// Inverse of [`LabelSet::parse`].
    pub fn to_text(&self) -> String {
        let mut out = self.names.join("\n");
        let garment: Vec<String> = self.garment.iter().map(|g| g.to_string()).collect();
        out.push_str(&format!("\n@garment {}\n@background {}\n", garment.join(" "), self.background));
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn garment_labels(&self) -> &[usize] {
        &self.garment
    }

    pub fn background_index(&self) -> usize {
        self.background
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_garment(&self, label: u8) -> bool {
        self.garment.binary_search(&(label as usize)).is_ok()
    }
}

/// Per-pixel label indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self { height, width, labels: vec![label; height * width] }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn validate(&self, labels: &LabelSet) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= labels.len()) {
            Some(l) => Err(Error::Label(format!("label {l} out of range for {} labels", labels.len()))),
            None => Ok(()),
        }
    }

    /// `j x h x w` one-hot encoding.
    pub fn one_hot<T: Float>(&self, num_labels: usize) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[num_labels, self.height, self.width]);
        let d = t.data_mut();
        for (i, &l) in self.labels.iter().enumerate() {
            if (l as usize) < num_labels {
                d[l as usize * plane + i] = T::one();
            }
        }
        t
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let labels = (0..height * width)
            .map(|i| {
                let (r, c) = (i / width, i % width);
                self.get(r * self.height / height, c * self.width / width)
            })
            .collect();
        Self { height, width, labels }
    }
}

/// Pre-argmax shape logits, `j x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLogits(Tensor<f32>);

impl SegmentationLogits {
    pub fn new(channels: Tensor<f32>, labels: &LabelSet) -> Result<Self> {
        let (j, _, _) = channels.dims3()?;
        if j != labels.len() {
            return Err(Error::Shape(format!("{j} logit channels for {} labels", labels.len())));
        }
        Ok(Self(channels))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }
}

/// Index of the largest channel per pixel; ties go to the lowest index.
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Result<SegmentationMap> {
    let (j, h, w) = logits.dims3()?;
    if j > 256 {
        return Err(Error::Shape(format!("{j} channels exceed the 8-bit label range")));
    }
    let plane = h * w;
    let d = logits.data();
    let mut labels = Vec::with_capacity(plane);
    for i in 0..plane {
        let mut best = 0;
        let mut best_v = d[i];
        for c in 0..j {
            let v = d[c * plane + i];
            if v.is_nan() {
                return Err(Error::Numeric(format!("NaN logit at channel {c}, pixel {i}")));
            }
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        labels.push(best as u8);
    }
    SegmentationMap::new(h, w, labels)
}

pub fn argmax_labels(logits: &SegmentationLogits) -> Result<SegmentationMap> {
    argmax_channels(logits.tensor())
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize) -> bool) -> Self {
        Self { height, width, bits: (0..height * width).map(f).collect() }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// The mask replicated over `channels` planes as 0/1 values.
    pub fn to_tensor<T: Float>(&self, channels: usize) -> Tensor<T> {
        let plane = self.bits.len();
        Tensor::from_fn(&[channels, self.height, self.width], |i| {
            if self.bits[i % plane] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Pixels whose label is a garment label.
pub fn garment_mask(map: &SegmentationMap, labels: &LabelSet) -> Mask {
    Mask::from_fn(map.height, map.width, |i| labels.is_garment(map.labels[i]))
}

/// Pixels whose label is not background.
pub fn foreground_mask(map: &SegmentationMap, labels: &LabelSet) -> Mask {
    Mask::from_fn(map.height, map.width, |i| map.labels[i] as usize != labels.background_index())
}

/// A fixed, distinct color per label index for the PNG palette.
pub fn label_palette(count: usize) -> Vec<[u8; 3]> {
    (0..count)
        .map(|i| {
            let (mut rgb, mut id) = ([0u8; 3], i);
            for bit in 0..8 {
                for (c, v) in rgb.iter_mut().enumerate() {
                    *v |= (((id >> c) & 1) as u8) << (7 - bit);
                }
                id >>= 3;
            }
            rgb
        })
        .collect()
}

/// Writes an 8-bit indexed PNG whose pixel values are the label indices.
pub fn save_label_map(path: impl AsRef<Path>, map: &SegmentationMap, labels: &LabelSet) -> Result<()> {
    map.validate(labels)?;
    let palette = label_palette(labels.len()).into_iter().flatten().collect();
    write_png(path.as_ref(), map.width, map.height, png::ColorType::Indexed, Some(palette), &map.labels)
}

/// Reads an indexed (or 8-bit grayscale) PNG as a label map.
pub fn ingest_label_map(
    path: impl AsRef<Path>,
    labels: &LabelSet,
    expected_size: Option<(usize, usize)>,
) -> Result<SegmentationMap> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    let supported = matches!(raw.color, png::ColorType::Indexed | png::ColorType::Grayscale);
    if !supported || raw.depth != png::BitDepth::Eight {
        return Err(Error::Label(format!(
            "{}: label maps must be 8-bit indexed or grayscale PNG, got {:?}/{:?}",
            path.display(),
            raw.color,
            raw.depth
        )));
    }
    if let Some((h, w)) = expected_size {
        if (raw.height, raw.width) != (h, w) {
            return Err(Error::Dimension(format!(
                "{}: label map is {}x{}, expected {h}x{w}",
                path.display(),
                raw.height,
                raw.width
            )));
        }
    }
    let map = SegmentationMap::new(raw.height, raw.width, raw.bytes)?;
    map.validate(labels).map_err(|e| Error::Label(format!("{}: {e}", path.display())))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let l = LabelSet::atr();
        assert_eq!(LabelSet::parse(&l.to_text()).unwrap(), l);
    }

    #[test]
    fn atr_defaults() {
        let l = LabelSet::atr();
        assert_eq!(l.len(), 18);
        assert_eq!(l.background_index(), 0);
        assert_eq!(l.names()[0], "background");
        assert_eq!(l.names()[17], "scarf");
        assert_eq!(l.garment_labels(), &[4, 5, 6, 7, 8, 17]);
    }

    #[test]
    fn invalid_label_sets() {
        let names: Vec<String> = ATR_LABELS.iter().map(|s| s.to_string()).collect();
        assert!(LabelSet::new(names.clone(), vec![0], 0).is_err());
        assert!(LabelSet::new(names.clone(), vec![11], 0).is_err());
        assert!(LabelSet::new(names.clone(), vec![18], 0).is_err());
        assert!(LabelSet::new(names, vec![4], 18).is_err());
    }

    #[test]
    fn parse_text_format() {
        let text = format!("# atr\n{}\n@garment 7 4\n", ATR_LABELS.join("\n"));
        let l = LabelSet::parse(&text).unwrap();
        assert_eq!(l.garment_labels(), &[4, 7]);
    }

    #[test]
    fn argmax_tie_goes_to_lowest_index() {
        let mut t = Tensor::<f32>::zeros(&[18, 1, 1]);
        t.data_mut()[3] = 2.0;
        t.data_mut()[7] = 2.0;
        assert_eq!(argmax_channels(&t).unwrap().labels(), &[3]);
    }

    #[test]
    fn argmax_nan_is_numeric_error() {
        let mut t = Tensor::<f32>::zeros(&[18, 2, 2]);
        t.data_mut()[40] = f32::NAN;
        assert!(matches!(argmax_channels(&t), Err(Error::Numeric(_))));
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let map = SegmentationMap::new(2, 3, vec![0, 4, 17, 11, 7, 7]).unwrap();
        let oh = map.one_hot::<f32>(18);
        assert_eq!(argmax_channels(&oh).unwrap(), map);
    }

    #[test]
    fn masks_on_uniform_maps() {
        let l = LabelSet::atr();
        let bg = SegmentationMap::filled(3, 3, 0);
        assert_eq!(garment_mask(&bg, &l).count(), 0);
        assert_eq!(foreground_mask(&bg, &l).count(), 0);
        let dress = SegmentationMap::filled(3, 3, 7);
        assert_eq!(garment_mask(&dress, &l).count(), 9);
        assert_eq!(foreground_mask(&dress, &l).count(), 9);
        assert_eq!(foreground_mask(&SegmentationMap::filled(2, 2, 11), &l).count(), 4);
    }

    #[test]
    fn palette_colors_are_distinct() {
        let p = label_palette(18);
        let set: std::collections::HashSet<_> = p.iter().collect();
        assert_eq!(set.len(), 18);
        assert_eq!(p[0], [0, 0, 0]);
    }

    #[test]
    fn label_png_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelSet::atr();
        let map = SegmentationMap::new(4, 5, (0..20).map(|i| (i % 18) as u8).collect()).unwrap();
        let p = dir.path().join("m.png");
        save_label_map(&p, &map, &l).unwrap();
        assert_eq!(ingest_label_map(&p, &l, Some((4, 5))).unwrap(), map);
        assert!(matches!(ingest_label_map(&p, &l, Some((5, 5))), Err(Error::Dimension(_))));

        let bad = dir.path().join("bad.png");
        write_png(&bad, 2, 1, png::ColorType::Grayscale, None, &[0, 18]).unwrap();
        assert!(matches!(ingest_label_map(&bad, &l, None), Err(Error::Label(_))));

        let zero = dir.path().join("zero.png");
        write_png(&zero, 3, 2, png::ColorType::Grayscale, None, &[0; 6]).unwrap();
        assert_eq!(ingest_label_map(&zero, &l, None).unwrap(), SegmentationMap::filled(2, 3, 0));
    }
}
