//! Programmatic image/caption agreement score.
//!
//! An object counts as found when (a) the mean color of its cell's central
//! 4x4 patch is nearest, in Euclidean distance, to the captioned color over
//! the table {red, green, blue, black}, and (b) the Pearson correlation
//! between the cell's color-presence map and the captioned shape's 8x8
//! template exceeds 0.6. The score is the found fraction; an empty caption
//! scores 1.0 vacuously.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::toydata::{parse_caption, CaptionError, Color, Obj, CELL, IMG_LEN, IMG_SIZE};

pub const SHAPE_CORR_THRESHOLD: f64 = 0.6;

/// red, green, blue, black
const COLOR_TABLE: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];

#[derive(Debug, thiserror::Error)]
pub enum CheckError {
    #[error("image must be a flat 32x32x3 tensor, got {0} values")]
    BadImage(usize),
    #[error("caption: {0}")]
    BadCaption(#[from] CaptionError),
}

fn nearest_color(rgb: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in COLOR_TABLE.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (rgb[k] - c[k]) * (rgb[k] - c[k])).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn color_index(c: Color) -> usize {
    match c {
        Color::Red => 0,
        Color::Green => 1,
        Color::Blue => 2,
    }
}

fn pixel(img: &[f64], r: usize, c: usize) -> [f64; 3] {
    let base = (r * IMG_SIZE + c) * 3;
    [img[base], img[base + 1], img[base + 2]]
}

/// Is this one captioned object present in the image?
pub fn object_found(img: &[f64], obj: &Obj) -> bool {
    let want = color_index(obj.color);
    let (r0, c0) = (obj.row * CELL, obj.col * CELL);

    // central 4x4 mean color
    let mut mean = [0.0f64; 3];
    for r in 2..6 {
        for c in 2..6 {
            let p = pixel(img, r0 + r, c0 + c);
            for k in 0..3 {
                mean[k] += p[k];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= 16.0;
    }
    if nearest_color(mean) != want {
        return false;
    }

    // presence map: per-pixel nearest color equals the captioned color
    let template = obj.shape.mask();
    let mut presence = [0.0f64; CELL * CELL];
    for r in 0..CELL {
        for c in 0..CELL {
            if nearest_color(pixel(img, r0 + r, c0 + c)) == want {
                presence[r * CELL + c] = 1.0;
            }
        }
    }
    let tmpl: Vec<f64> = template.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    pearson(&presence, &tmpl) > SHAPE_CORR_THRESHOLD
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Fraction of captioned objects found in the image.
pub fn check_image<S: Scalar>(image: &Tensor<S>, caption: &[usize]) -> Result<f64, CheckError> {
    if image.len() != IMG_LEN {
        return Err(CheckError::BadImage(image.len()));
    }
    let scene = parse_caption(caption)?;
    let img: Vec<f64> = image.data().iter().map(|v| v.to_f64_c()).collect();
    if scene.objects.is_empty() {
        return Ok(1.0);
    }
    let found = scene.objects.iter().filter(|o| object_found(&img, o)).count();
    Ok(found as f64 / scene.objects.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{
        caption_tokens, generate_corpus, render, vocab, Obj, Scene, Shape, Split,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ground_truth_renders_score_one() {
        for (scene, caption) in generate_corpus(13, 60, Split::All) {
            let img: Tensor<f64> = render(&scene);
            let score = check_image(&img, &caption).unwrap();
            assert_eq!(score, 1.0, "scene {:?}", scene);
        }
    }

    #[test]
    fn all_black_image_scores_zero() {
        let img: Tensor<f64> = Tensor::zeros(&[IMG_LEN]);
        for (_, caption) in generate_corpus(5, 10, Split::All) {
            assert_eq!(check_image(&img, &caption).unwrap(), 0.0);
        }
    }

    #[test]
    fn recolored_object_is_not_found() {
        let scene = Scene::new(vec![Obj { shape: Shape::Square, color: Color::Red, row: 1, col: 1 }]);
        let caption = caption_tokens(&scene);
        let repainted = Scene::new(vec![Obj { shape: Shape::Square, color: Color::Blue, row: 1, col: 1 }]);
        let img: Tensor<f64> = render(&repainted);
        assert_eq!(check_image(&img, &caption).unwrap(), 0.0);
    }

    #[test]
    fn wrong_shape_in_right_color_is_rejected() {
        for &(a, b) in &[
            (Shape::Square, Shape::Circle),
            (Shape::Square, Shape::Triangle),
            (Shape::Circle, Shape::Triangle),
        ] {
            let caption = caption_tokens(&Scene::new(vec![Obj { shape: a, color: Color::Green, row: 2, col: 2 }]));
            let drawn = Scene::new(vec![Obj { shape: b, color: Color::Green, row: 2, col: 2 }]);
            let img: Tensor<f64> = render(&drawn);
            assert_eq!(check_image(&img, &caption).unwrap(), 0.0, "{:?} passed as {:?}", b, a);
        }
    }

    #[test]
    fn malformed_caption_is_an_error() {
        let img: Tensor<f64> = Tensor::zeros(&[IMG_LEN]);
        assert!(check_image(&img, &[vocab::RED]).is_err());
        let wrong: Tensor<f64> = Tensor::zeros(&[10]);
        assert!(check_image(&wrong, &[vocab::BOS, vocab::EOS]).is_err());
    }

    #[test]
    fn partial_scenes_score_fractionally() {
        let full = Scene::new(vec![
            Obj { shape: Shape::Square, color: Color::Red, row: 0, col: 0 },
            Obj { shape: Shape::Circle, color: Color::Blue, row: 3, col: 3 },
        ]);
        let caption = caption_tokens(&full);
        let half = Scene::new(vec![full.objects[0]]);
        let img: Tensor<f64> = render(&half);
        assert_eq!(check_image(&img, &caption).unwrap(), 0.5);
    }

    #[test]
    fn soft_edges_still_pass() {
        // blur toward gray by 30%: colors stay nearest-correct
        let scene = Scene::new(vec![Obj { shape: Shape::Triangle, color: Color::Blue, row: 1, col: 2 }]);
        let caption = caption_tokens(&scene);
        let img: Tensor<f64> = render(&scene);
        let soft = img.map(|v| v * 0.7 + 0.12);
        assert_eq!(check_image(&soft, &caption).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn removing_an_object_never_raises_the_score(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let corpus = generate_corpus(seed, 1, Split::All);
            let (scene, caption) = &corpus[0];
            let img: Tensor<f64> = render(scene);
            let before = check_image(&img, caption).unwrap();
            if !scene.objects.is_empty() {
                let k = rng.gen_range(0..scene.objects.len());
                let mut objs = scene.objects.clone();
                objs.remove(k);
                let img_after: Tensor<f64> = render(&Scene::new(objs));
                let after = check_image(&img_after, caption).unwrap();
                prop_assert!(after <= before);
            }
        }
    }
}
