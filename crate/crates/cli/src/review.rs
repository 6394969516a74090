//! Visual aids for failure triage.

use stagematte::image::{AlphaMask, Image};
use stagematte::{Error, Result};

/// Channel-mean |image − background|, scaled so the largest difference is 1.
/// An image identical to its background gives all zeros.
pub fn diff_layer(image: &Image, background: &Image) -> Result<AlphaMask> {
    if image.dims() != background.dims() {
        return Err(Error::dims(image.dims(), background.dims()));
    }
    let d: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .zip(background.data().chunks_exact(3))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 3.0)
        .collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    let scaled = if max > 0.0 { d.iter().map(|v| v / max).collect() } else { d };
    AlphaMask::from_vec(image.width(), image.height(), scaled)
}

/// Four panels left to right: image, prediction, background, diff.
pub fn review_panel(image: &Image, prediction: &AlphaMask, background: &Image) -> Result<Image> {
    let (w, h) = image.dims();
    if prediction.dims() != (w, h) {
        return Err(Error::dims((w, h), prediction.dims()));
    }
    let diff = diff_layer(image, background)?;
    let gray = |m: &AlphaMask, x, y| {
        let v = m.get(x, y);
        [v, v, v]
    };
    Image::from_fn(4 * w, h, |x, y| match x / w {
        0 => image.pixel(x, y),
        1 => gray(prediction, x - w, y),
        2 => background.pixel(x - 2 * w, y),
        _ => gray(&diff, x - 3 * w, y),
    })
}
