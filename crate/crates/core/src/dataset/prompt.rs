//! Prompt rendering.

use super::DatasetError;
use crate::sigsynth::IqFrame;

/// Bumped whenever the rendered text changes.
pub const TEMPLATE_VERSION: u32 = 1;

pub const INTRO: &str = "You are diagnosing WiFi network pathologies based on signal information.";
pub const INSTRUCTION: &str = "Classify the WiFi condition based on the parameters provided.";
pub const ANSWER_CUE: &str = "Pathology Type:";

pub const DEFAULT_PREVIEW_LEN: usize = 8;
pub const DEFAULT_DECIMALS: usize = 3;

/// Fixed-point rendering, ties to even. Negative zero prints as zero.
pub fn format_fixed(value: f64, decimals: usize) -> String {
    let s = format!("{value:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

/// SNR without unit; integral values have no decimal point.
pub fn format_snr(snr_db: f64) -> String {
    if snr_db == 0.0 {
        return "0".to_string();
    }
    format!("{snr_db}")
}

/// `[(i1,q1), (i2,q2), ...]` over the first `preview_len` samples.
pub fn format_iq_preview(frame: &IqFrame, preview_len: usize, decimals: usize) -> String {
    let pairs: Vec<String> = frame.samples[..preview_len]
        .iter()
        .map(|z| format!("({},{})", format_fixed(z.re, decimals), format_fixed(z.im, decimals)))
        .collect();
    format!("[{}]", pairs.join(", "))
}

/// Renders the diagnosis prompt for one frame.
pub fn render_prompt(frame: &IqFrame, preview_len: usize, decimals: usize) -> Result<String, DatasetError> {
    if preview_len == 0 || preview_len > frame.samples.len() {
        return Err(DatasetError::PreviewLength {
            requested: preview_len,
            available: frame.samples.len(),
        });
    }
    if !frame.snr_db_target.is_finite() {
        return Err(DatasetError::InvalidSnr(frame.snr_db_target));
    }
    Ok(format!(
        "{INTRO}\n{INSTRUCTION}\nParameters: In-phase and quadrature (I/Q) data are {iq}. \
         The modulation type is {modulation}. Signal-to-Noise Ratio (SNR) is equal to {snr}.\n{ANSWER_CUE}",
        iq = format_iq_preview(frame, preview_len, decimals),
        modulation = frame.modulation.name(),
        snr = format_snr(frame.snr_db_target),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsynth::{synth_frame, ModulationKind};
    use num_complex::Complex64;

    fn qpsk_pair_frame() -> IqFrame {
        let clean = vec![
            Complex64::new(std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
            Complex64::new(-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
        ];
        IqFrame {
            samples: clean.clone(),
            clean,
            modulation: ModulationKind::Qpsk,
            snr_db_target: 10.0,
            seed: 0,
        }
    }

    #[test]
    fn renders_the_full_template() {
        let p = render_prompt(&qpsk_pair_frame(), 2, 3).unwrap();
        assert_eq!(
            p,
            "You are diagnosing WiFi network pathologies based on signal information.\n\
             Classify the WiFi condition based on the parameters provided.\n\
             Parameters: In-phase and quadrature (I/Q) data are [(0.707,0.707), (-0.707,0.707)]. \
             The modulation type is QPSK. Signal-to-Noise Ratio (SNR) is equal to 10.\n\
             Pathology Type:"
        );
    }

    #[test]
    fn single_pair_preview() {
        let p = render_prompt(&qpsk_pair_frame(), 1, 3).unwrap();
        assert!(p.contains("data are [(0.707,0.707)]. The"));
    }

    #[test]
    fn preview_bounds() {
        let f = qpsk_pair_frame();
        assert!(render_prompt(&f, 0, 3).is_err());
        assert!(render_prompt(&f, 3, 3).is_err());
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_fixed(0.125, 2), "0.12");
        assert_eq!(format_fixed(0.375, 2), "0.38");
        assert_eq!(format_fixed(-0.0004, 3), "0.000");
        assert_eq!(format_fixed(-1.5, 3), "-1.500");
        assert_eq!(format_snr(-14.0), "-14");
        assert_eq!(format_snr(-0.0), "0");
        assert_eq!(format_snr(2.5), "2.5");
    }

    #[test]
    fn seed_only_changes_the_iq_segment() {
        let a = synth_frame(ModulationKind::Qam16, 4.0, 1024, 1).unwrap();
        let b = synth_frame(ModulationKind::Qam16, 4.0, 1024, 2).unwrap();
        let pa = render_prompt(&a, 8, 3).unwrap();
        let pb = render_prompt(&b, 8, 3).unwrap();
        assert_ne!(pa, pb);
        let split = |p: &str| {
            let open = p.find('[').unwrap();
            let close = p.rfind(']').unwrap();
            (p[..open].to_string(), p[close + 1..].to_string())
        };
        assert_eq!(split(&pa), split(&pb));
    }

    #[test]
    fn every_sentence_once_and_cue_last() {
        let f = synth_frame(ModulationKind::Psk8, -20.0, 1024, 3).unwrap();
        let p = render_prompt(&f, 8, 3).unwrap();
        assert!(p.ends_with(ANSWER_CUE));
        for sentence in [INTRO, INSTRUCTION, "The modulation type is", "Signal-to-Noise Ratio (SNR) is equal to"] {
            assert_eq!(p.matches(sentence).count(), 1, "{sentence}");
        }
    }
}
