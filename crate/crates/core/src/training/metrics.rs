use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,test_acc,mean_edges,tau";

#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub index: usize,
    pub subject: String,
    pub label: usize,
    pub predicted: usize,
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when the split has no instance of that class.
    pub per_class_accuracy: [Option<f64>; 2],
    /// Mean number of undirected edges in the predicted graphs.
    pub mean_edges: f64,
    pub predictions: Vec<InstancePrediction>,
}

impl Metrics {
    /// Recomputes the summary numbers from a list of predictions.
    pub fn from_predictions(predictions: Vec<InstancePrediction>) -> Self {
        let n = predictions.len().max(1) as f64;
        let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
        let per_class_accuracy = [0, 1].map(|c| {
            let of_class: Vec<_> = predictions.iter().filter(|p| p.label == c).collect();
            (!of_class.is_empty()).then(|| {
                of_class.iter().filter(|p| p.predicted == c).count() as f64 / of_class.len() as f64
            })
        });
        Metrics {
            accuracy: correct as f64 / n,
            per_class_accuracy,
            mean_edges: predictions.iter().map(|p| p.edges as f64).sum::<f64>() / n,
            predictions,
        }
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("index,subject,label,predicted,edges\n");
        for p in &self.predictions {
            out.push_str(&format!("{},{},{},{},{}\n", p.index, p.subject, p.label, p.predicted, p.edges));
        }
        out
    }
}

/// Noise-free evaluation of every sequence in `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::config("split", "cannot evaluate an empty split"));
    }
    let predictions = data
        .sequences
        .iter()
        .enumerate()
        .map(|(index, seq)| {
            let p = model.predict(seq)?;
            Ok(InstancePrediction {
                index,
                subject: seq.subject_id.clone(),
                label: seq.label,
                predicted: p.label,
                edges: p.graph.edge_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_predictions(predictions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_edges: f64,
    pub tau: f64,
}

pub fn history_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.mean_edges, r.tau
        ));
    }
    out
}
