//! The ASR network and the baseline autoencoder.

mod asr;
mod baseline;
pub mod layers;
mod latent;

pub use asr::{AsrConfig, AsrModel, AsrOutput, ConvSpec};
pub use baseline::{BaselineConfig, BaselineModel};
pub use latent::StructuredLatent;

#[cfg(test)]
mod tests {
    use super::layers::Ctx;
    use super::*;
    use crate::autodiff::{Graph, Tensor};
    use crate::error::AsrError;
    use crate::renderer::EllipseParams;

    fn images(n: usize, side: usize, seed: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 3, side, side], |i| ((i * 7919 + seed * 104729) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn default_schedule_shapes() {
        let c = AsrConfig::default();
        c.validate().unwrap();
        assert_eq!(c.map_sides().unwrap(), vec![64, 16, 4]);
        assert_eq!(c.modeler_strides().unwrap(), vec![8, 4, 2]);
        assert_eq!(c.ellipse_count(), 84);
        assert_eq!(6 * c.ellipse_count(), 504);
        let s = AsrConfig::small();
        s.validate().unwrap();
        assert_eq!(s.map_sides().unwrap(), vec![32, 8, 4]);
        assert_eq!(s.modeler_strides().unwrap(), vec![4, 2, 2]);
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let mut c = AsrConfig::small();
        c.grids = vec![8, 4, 3];
        assert!(matches!(c.validate(), Err(AsrError::Config(_))));
    }

    #[test]
    fn forward_ranges_and_zero_gate() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 1).unwrap();
        let x = images(2, 64, 0);
        let (recon, lat) = m.infer(&x, &[1.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(recon.shape(), &[2, 3, 64, 64]);
        assert!(recon.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for l in &lat {
            assert_eq!(l.ellipse_count(), 84);
            l.validate(&m.config.scales()).unwrap();
            assert!(l.scales[1].iter().all(|p| *p == EllipseParams::INVISIBLE));
            assert!(l.background.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn saturated_modeler_hits_upper_range() {
        let mut m = AsrModel::<f64>::new(AsrConfig::small(), 2).unwrap();
        let id = m.params.find("modeler.2.bias").unwrap();
        m.params.get_mut(id).data_mut()[0] = 1e3;
        let (_, lat) = m.infer(&images(1, 64, 1), &[1.0; 3], 1).unwrap();
        assert!(lat[0].scales[2].iter().all(|p| p.w == 2.0));
    }

    #[test]
    fn eval_mode_is_deterministic_and_batch_independent() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 3).unwrap();
        let x = images(3, 64, 2);
        let (a, _) = m.infer(&x, &[1.0; 3], 3).unwrap();
        let (b, _) = m.infer(&x, &[1.0; 3], 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let again = AsrModel::<f64>::new(AsrConfig::small(), 3).unwrap();
        let (c, _) = again.infer(&x, &[1.0; 3], 3).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn gate_outside_unit_interval_is_rejected() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 4).unwrap();
        let err = m.infer(&images(1, 64, 0), &[1.0, 1.5, 1.0], 1).unwrap_err();
        assert!(matches!(err, AsrError::Contract(_)));
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 5).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &m.params, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
        assert!(matches!(m.encode(&mut g, &mut ctx, x), Err(AsrError::Dimension { .. })));
    }

    #[test]
    fn initialisation_rules() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 6).unwrap();
        for name in ["background.0.bias", "background.1.bias"] {
            let b = m.params.get(m.params.find(name).unwrap());
            assert!(b.data().iter().all(|&v| v == 1.0));
        }
        let bias = m.params.get(m.params.find("enc.1.0.conv.bias").unwrap());
        assert!(bias.data().iter().any(|v| v.abs() > 0.5));
    }

    #[test]
    fn flat_latent_round_trip() {
        let m = AsrModel::<f64>::new(AsrConfig::small(), 7).unwrap();
        let (_, lat) = m.infer(&images(1, 64, 3), &[1.0; 3], 1).unwrap();
        let flat = lat[0].to_flat();
        assert_eq!(flat.len(), 504);
        let back = StructuredLatent::from_flat(&flat, &m.config.scales(), lat[0].background).unwrap();
        assert_eq!(back, lat[0]);
        assert!(StructuredLatent::from_flat(&flat[1..], &m.config.scales(), [0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_across_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = AsrModel::<f32>::new(AsrConfig::small(), 8).unwrap();
        m.save(&path).unwrap();
        let back = AsrModel::<f32>::load(AsrConfig::small(), &path).unwrap();
        assert_eq!(back.params, m.params);
        let wide = AsrModel::<f64>::load(AsrConfig::small(), &path).unwrap();
        assert_eq!(wide.params.cast::<f32>(), m.params);
        assert!(AsrModel::<f32>::load(AsrConfig::default(), &path).is_err());
    }

    #[test]
    fn baseline_parameter_count() {
        let m = BaselineModel::<f32>::new(BaselineConfig::default(), 0).unwrap();
        let n = m.trainable_count() as f64;
        assert!((n - 3_781_509.0).abs() / 3_781_509.0 <= 0.10, "{n}");
        assert_eq!(m.trainable_count(), 3_778_683);
    }

    #[test]
    fn baseline_output_range_and_latent_width() {
        let m = BaselineModel::<f64>::new(BaselineConfig::small(), 1).unwrap();
        let (r, z) = m.infer(&images(2, 64, 4), 2).unwrap();
        assert_eq!(r.shape(), &[2, 3, 64, 64]);
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(z.iter().all(|v| v.len() == 200));
    }
}
