use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const STEP_HEADER: &str = "step,epoch,gen_loss,disc_loss,grad_norm_gen,grad_norm_disc";
pub const EPOCH_HEADER: &str = "epoch,psnr_mean,ssim_mean";
pub const SIGMA_HEADER: &str = "step,max_sigma";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    pub epoch: u64,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub grad_norm_gen: f64,
    pub grad_norm_disc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: u64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

/// Largest σ over the discriminator's normalized weights at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaRow {
    pub step: u64,
    pub max_sigma: f64,
}

/// Rows produced by one call to the training loop.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub sigmas: Vec<SigmaRow>,
}

impl StepRow {
    fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.gen_loss, self.disc_loss, self.grad_norm_gen, self.grad_norm_disc
        )
    }
}

fn lines<T>(rows: &[T], f: impl Fn(&T) -> String) -> String {
    rows.iter().fold(String::new(), |mut s, r| {
        let _ = writeln!(s, "{}", f(r));
        s
    })
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        format!("{STEP_HEADER}\n{}", lines(&self.steps, StepRow::line))
    }

    pub fn epochs_csv(&self) -> String {
        format!(
            "{EPOCH_HEADER}\n{}",
            lines(&self.epochs, |r| format!("{},{},{}", r.epoch, r.psnr_mean, r.ssim_mean))
        )
    }

    pub fn sigmas_csv(&self) -> String {
        format!("{SIGMA_HEADER}\n{}", lines(&self.sigmas, |r| format!("{},{}", r.step, r.max_sigma)))
    }

    /// Writes `train_log.csv`, `validation.csv` and `sigma.csv` under `dir`.
    /// With `append`, rows go after existing content and headers are only
    /// written to new files.
    pub fn write(&self, dir: &Path, append: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, csv) in [
            ("train_log.csv", self.steps_csv()),
            ("validation.csv", self.epochs_csv()),
            ("sigma.csv", self.sigmas_csv()),
        ] {
            let path = dir.join(name);
            let exists = path.is_file();
            let text = if append && exists {
                csv.split_once('\n').map_or("", |(_, rest)| rest).to_string()
            } else {
                csv
            };
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_append() {
        let row = |step| StepRow {
            step,
            epoch: 1,
            gen_loss: 0.5,
            disc_loss: 1.25,
            grad_norm_gen: 0.1,
            grad_norm_disc: 2.0,
        };
        let a = TrainLog { steps: vec![row(1)], ..Default::default() };
        let b = TrainLog { steps: vec![row(2)], ..Default::default() };
        assert_eq!(a.steps_csv(), format!("{STEP_HEADER}\n1,1,0.5,1.25,0.1,2\n"));
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path(), false).unwrap();
        b.write(dir.path(), true).unwrap();
        let text = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(text, format!("{STEP_HEADER}\n1,1,0.5,1.25,0.1,2\n2,1,0.5,1.25,0.1,2\n"));
        assert_eq!(fs::read_to_string(dir.path().join("validation.csv")).unwrap(), format!("{EPOCH_HEADER}\n"));
    }
}
