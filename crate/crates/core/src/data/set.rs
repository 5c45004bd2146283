use crate::error::{Error, Result};

/// Images stored as `u8` in (N, C, H, W) order with one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledImageSet {
    images: Vec<u8>,
    labels: Vec<usize>,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    /// CIFAR-100 coarse labels, kept so records re-encode byte for byte.
    coarse: Option<Vec<u8>>,
}

impl LabeledImageSet {
    pub fn new(
        images: Vec<u8>,
        labels: Vec<usize>,
        (channels, height, width): (usize, usize, usize),
        classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if labels.is_empty() || per == 0 {
            return Err(Error::invalid("image set must hold at least one non-empty image"));
        }
        if images.len() != labels.len() * per {
            return Err(Error::invalid(format!(
                "{} bytes of pixels for {} images of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::invalid(format!("label {y} of image {i} is outside 0..{classes}")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            channels,
            height,
            width,
            classes,
            coarse: None,
        })
    }

    pub(crate) fn with_coarse(mut self, coarse: Vec<u8>) -> Self {
        debug_assert_eq!(coarse.len(), self.labels.len());
        self.coarse = Some(coarse);
        self
    }

    pub(crate) fn coarse(&self) -> Option<&[u8]> {
        self.coarse.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// The first `per_class` images of every class, in original order.
    pub fn first_per_class(&self, per_class: usize) -> Result<Self> {
        let mut taken = vec![0; self.classes];
        let mut keep = Vec::new();
        for (i, &y) in self.labels.iter().enumerate() {
            if taken[y] < per_class {
                taken[y] += 1;
                keep.push(i);
            }
        }
        if let Some((class, &have)) = taken.iter().enumerate().find(|(_, &t)| t < per_class) {
            return Err(Error::invalid(format!(
                "requested {per_class} images per class but class {class} has {have}"
            )));
        }
        Ok(self.select(&keep))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coarse: self.coarse.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
            ..*self
        }
    }
}
