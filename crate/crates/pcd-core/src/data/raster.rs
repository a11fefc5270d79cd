//! Annotation to per-pixel class labels.

use super::LandmarkAnnotation;
use crate::error::{Error, Result};
use crate::loss::LabelMap;

/// Rasterize an annotation: each visible landmark claims exactly its
/// nearest pixel, everything else is background. A visible landmark whose
/// rounded position leaves the image is a data error, as are two landmarks
/// rounding onto the same pixel; callers batching many records should skip
/// such records with a warning rather than abort.
pub fn rasterize_labels(ann: &LandmarkAnnotation, image_size: usize) -> Result<LabelMap> {
    let mut points = Vec::with_capacity(ann.landmarks.len());
    for (k, lm) in ann.landmarks.iter().enumerate() {
        if !lm.visible {
            points.push(None);
            continue;
        }
        let (px, py) = (lm.x.round(), lm.y.round());
        if px < 0.0 || py < 0.0 || px >= image_size as f64 || py >= image_size as f64 {
            return Err(Error::data(format!(
                "visible landmark {k} at ({}, {}) rasterizes outside the {image_size}px image",
                lm.x, lm.y
            )));
        }
        points.push(Some((py as usize, px as usize)));
    }
    LabelMap::from_points(image_size, image_size, &points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Landmark;

    fn ann_with(landmarks: Vec<Landmark>) -> LandmarkAnnotation {
        LandmarkAnnotation {
            image: "test".into(),
            bbox: (0.0, 0.0, 64.0, 64.0),
            pose: (0.0, 0.0, 0.0),
            landmarks,
        }
    }

    #[test]
    fn all_invisible_yields_all_background() {
        let ann = ann_with(vec![Landmark { x: 5.0, y: 5.0, visible: false }; 21]);
        let map = rasterize_labels(&ann, 64).unwrap();
        assert!(map.positives().is_empty());
        assert_eq!(map.n(), 21);
    }

    #[test]
    fn coordinates_round_to_nearest_pixel() {
        let ann = ann_with(vec![Landmark { x: 10.4, y: 20.6, visible: true }]);
        let map = rasterize_labels(&ann, 64).unwrap();
        assert_eq!(map.positives(), vec![(0, 21, 10)]);
        assert_eq!(map.class_at(21, 10), 0);
    }

    #[test]
    fn colliding_landmarks_error() {
        let ann = ann_with(vec![
            Landmark { x: 10.4, y: 20.4, visible: true },
            Landmark { x: 9.6, y: 19.8, visible: true },
        ]);
        assert!(rasterize_labels(&ann, 64).is_err());
    }

    #[test]
    fn visible_point_outside_image_errors() {
        let ann = ann_with(vec![Landmark { x: 63.6, y: 10.0, visible: true }]);
        assert!(rasterize_labels(&ann, 64).is_err());
        let ann = ann_with(vec![Landmark { x: -0.6, y: 10.0, visible: true }]);
        assert!(rasterize_labels(&ann, 64).is_err());
    }
}
