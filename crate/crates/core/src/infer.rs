//! Inference helpers: padded enhancement and color-query activation maps.

use crate::dce::visualize_query;
use crate::fusion::FdceModel;
use crate::imageio::Image;
use crate::nn::ParamStore;
use crate::tensor::{Graph, Real, Result, Tensor, TensorError};

/// Coarse and final enhancement of one image. Sides that are not powers of
/// two of at least 8 are reflect-padded up to one and the result is cropped.
pub fn enhance<T: Real>(model: &FdceModel, params: &ParamStore<T>, img: &Image) -> Result<(Image, Image)> {
    let (h, w) = img.dims();
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    let padded = reflect_pad(img, ph, pw);
    let mut g = Graph::<T>::new();
    let p = params.bind_frozen(&mut g)?;
    let x = g.constant(padded.to_chw::<T>().reshape(&[1, 3, ph, pw])?)?;
    let out = model.forward(&mut g, &p, x)?;
    let take = |v| -> Result<Image> {
        let t = g.value(v).clone().reshape(&[3, ph, pw])?;
        let img = Image::from_chw(&t).map_err(|e| TensorError::invalid("enhance", e.to_string()))?;
        Ok(img.crop(0, 0, h, w))
    };
    Ok((take(out.coarse)?, take(out.refined)?))
}

/// Smallest power of two that is at least `max(n, 8)`.
pub fn padded_extent(n: usize) -> usize {
    n.max(8).next_power_of_two()
}

/// Extends `img` to `h × w` by mirroring about the last row and column.
pub fn reflect_pad(img: &Image, h: usize, w: usize) -> Image {
    let (ih, iw) = img.dims();
    let mirror = |i: usize, n: usize| {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    Image::from_fn(h, w, |y, x, c| img.get(mirror(y, ih), mirror(x, iw), c))
}

/// Activation maps of the `M` learned color queries over the 1/2-scale
/// feature level, each `[H/2, W/2]` with values in `(0, 1)`. The key
/// projection is that of the last block attending to that level.
pub fn query_maps<T: Real>(model: &FdceModel, params: &ParamStore<T>, img: &Image) -> Result<Vec<Tensor<T>>> {
    let (h, w) = img.dims();
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    let padded = reflect_pad(img, ph, pw);
    let mut g = Graph::<T>::new();
    let p = params.bind_frozen(&mut g)?;
    let x = g.constant(padded.to_chw::<T>().reshape(&[1, 3, ph, pw])?)?;
    let (pyramid, _) = model.fce.forward(&mut g, &p, x)?;
    let sce = model.sce.forward(&mut g, &p, &pyramid)?;
    let f1 = g.value(pyramid.levels[0]);
    let fs = f1.shape().to_vec();
    let features = f1.clone().reshape(&[fs[1], fs[2], fs[3]])?;
    let block = model
        .sce
        .blocks
        .iter()
        .zip(&sce.schedule)
        .filter(|(_, &(_, level))| level == 0)
        .map(|(b, _)| b)
        .last()
        .ok_or_else(|| TensorError::invalid("query_maps", "no block attends to the first level"))?;
    let e = g.value(sce.embeddings);
    let (m, ce) = (e.shape()[1], e.shape()[2]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    (0..m)
        .map(|q| {
            let query = Tensor::new(&[ce], e.data()[q * ce..(q + 1) * ce].to_vec())?;
            let map = visualize_query(&query, &features, params.get(block.k.weight), params.get(block.k.bias))?;
            // crop the padding back off
            let cols = map.shape()[1];
            Tensor::new(
                &[oh, ow],
                (0..oh * ow).map(|i| map.data()[(i / ow) * cols + i % ow]).collect(),
            )
        })
        .collect()
}
