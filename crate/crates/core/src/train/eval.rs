use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::thread;

use super::batch::{assemble, View};
use crate::data::SceneSample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Summary};
use crate::network::AsaNet;
use crate::nn::{argmax_classes, IGNORE_INDEX};
use crate::tensor::{no_grad, Element};

/// Colors of class indices in prediction maps; index `i` uses entry
/// `i mod 16`.
pub const PALETTE: [[u8; 3]; 16] = [
    [128, 128, 128],
    [31, 119, 180],
    [44, 160, 44],
    [255, 187, 120],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
    [255, 127, 14],
    [152, 223, 138],
    [174, 199, 232],
    [255, 152, 150],
    [197, 176, 213],
    [0, 0, 0],
];

const EVAL_BATCH: usize = 8;

fn check_geometry<T: Element>(model: &AsaNet<T>, samples: &[SceneSample]) -> Result<()> {
    let cfg = model.config();
    for s in samples {
        if s.num_classes != cfg.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model has {}",
                s.num_classes, cfg.num_classes
            )));
        }
        if (s.height, s.width) != (cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "scene is {}×{}, model expects {}×{}",
                s.height, s.width, cfg.height, cfg.width
            )));
        }
    }
    Ok(())
}

fn predict_serial<T: Element>(model: &AsaNet<T>, samples: &[SceneSample]) -> Result<Vec<Vec<u8>>> {
    let cfg = model.config();
    let plane = cfg.height * cfg.width;
    let mut out = Vec::with_capacity(samples.len());
    no_grad(|| {
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&SceneSample> = chunk.iter().collect();
            let b = assemble::<T>(&refs, &vec![View::IDENTITY; refs.len()], cfg.height, cfg.width)?;
            let pred = argmax_classes(&model.forward(&b.rgb, &b.sar)?);
            out.extend(pred.chunks(plane).map(<[u8]>::to_vec));
        }
        Ok(out)
    })
}

/// Per-sample argmax label maps, sharded over the available cores.
pub fn predict<T: Element>(model: &AsaNet<T>, samples: &[SceneSample]) -> Result<Vec<Vec<u8>>> {
    check_geometry(model, samples)?;
    let workers = thread::available_parallelism().map_or(1, |n| n.get());
    let per = samples.len().div_ceil(workers.max(1)).max(EVAL_BATCH);
    if per >= samples.len() {
        return predict_serial(model, samples);
    }
    let parts: Vec<Result<Vec<Vec<u8>>>> = thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per)
            .map(|part| scope.spawn(move || predict_serial(model, part)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Confusion matrix of the model's predictions against the sample labels.
pub fn confusion<T: Element>(model: &AsaNet<T>, samples: &[SceneSample]) -> Result<ConfusionMatrix> {
    let preds = predict(model, samples)?;
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for (p, s) in preds.iter().zip(samples) {
        cm.update(p, &s.label, s.width, IGNORE_INDEX)?;
    }
    Ok(cm)
}

/// Result of evaluating one model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub summary: Summary,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = self.summary.to_text(&self.class_names);
        out.push_str("\nconfusion (rows = truth, cols = prediction)\n");
        let k = self.confusion.num_classes();
        for t in 0..k {
            let row: Vec<String> = (0..k).map(|p| format!("{:>8}", self.confusion.get(t, p))).collect();
            out.push_str(&row.join(""));
            out.push('\n');
        }
        out
    }
}

pub fn evaluate<T: Element>(model: &AsaNet<T>, samples: &[SceneSample], class_names: &[String]) -> Result<EvalReport> {
    let confusion = confusion(model, samples)?;
    Ok(EvalReport {
        summary: confusion.summary()?,
        confusion,
        class_names: class_names.to_vec(),
    })
}

/// Writes a label map as an indexed-color PNG using [`PALETTE`].
pub fn write_label_png(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Contract(format!("{} labels for a {height}×{width} map", labels.len())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (h, w) = (u32::try_from(height), u32::try_from(width));
    let (Ok(h), Ok(w)) = (h, w) else {
        return Err(Error::Contract("label map too large for PNG".into()));
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.concat());
    let indices: Vec<u8> = labels.iter().map(|&l| l % PALETTE.len() as u8).collect();
    let write = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(write)?;
    writer.write_image_data(&indices).map_err(write)?;
    writer.finish().map_err(write)
}

/// Writes one `pred_NNNNNN.png` per sample into `dir`.
pub fn write_prediction_pngs(dir: &Path, preds: &[Vec<u8>], names: &[String], height: usize, width: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (p, name) in preds.iter().zip(names) {
        let stem = Path::new(name).file_stem().unwrap_or_default().to_string_lossy();
        write_label_png(&dir.join(format!("{stem}.png")), p, height, width)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::network::NetConfig;

    fn tiny_net() -> NetConfig {
        NetConfig {
            widths: vec![2, 3, 3, 4],
            blocks: 1,
            num_classes: 4,
            height: 16,
            width: 16,
            decoder_width: 3,
            ..NetConfig::default()
        }
    }

    fn scenes(n: u64) -> Vec<SceneSample> {
        let spec = SceneSpec::with_classes(4, 16);
        (0..n).map(|i| generate_scene(&spec, i)).collect()
    }

    #[test]
    fn own_predictions_as_labels_give_perfect_scores() {
        let model = AsaNet::<f32>::new(&tiny_net(), 1).unwrap();
        let mut samples = scenes(11);
        let preds = predict(&model, &samples).unwrap();
        for (s, p) in samples.iter_mut().zip(&preds) {
            s.label = p.clone();
        }
        let cm = confusion(&model, &samples).unwrap();
        let s = cm.summary().unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.oa, 1.0);
    }

    #[test]
    fn evaluation_is_repeatable_and_batch_independent() {
        let model = AsaNet::<f32>::new(&tiny_net(), 2).unwrap();
        let samples = scenes(19);
        let names: Vec<String> = SceneSpec::default().class_names;
        let a = evaluate(&model, &samples, &names).unwrap();
        let b = evaluate(&model, &samples, &names).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let serial = predict_serial(&model, &samples).unwrap();
        let single: Vec<Vec<u8>> = samples.iter().flat_map(|s| predict_serial(&model, std::slice::from_ref(s)).unwrap()).collect();
        assert_eq!(serial, single);
        assert_eq!(a.confusion.total(), 19 * 256);
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let model = AsaNet::<f32>::new(&tiny_net(), 1).unwrap();
        let spec = SceneSpec::with_classes(5, 16);
        assert!(matches!(predict(&model, &[generate_scene(&spec, 0)]), Err(Error::Config(_))));
        let big = generate_scene(&SceneSpec::with_classes(4, 32), 0);
        assert!(matches!(predict(&model, &[big]), Err(Error::Config(_))));
    }

    #[test]
    fn png_maps_decode_to_the_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let labels: Vec<u8> = (0..12).map(|i| (i % 5) as u8).collect();
        write_label_png(&path, &labels, 3, 4).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height, info.color_type), (4, 3, png::ColorType::Indexed));
        assert_eq!(info.palette.as_deref().unwrap(), &PALETTE.concat()[..]);
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..12], &labels[..]);
    }
}
