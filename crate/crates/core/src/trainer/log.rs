pub const CSV_HEADER: &str = "iteration,loss,seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    /// Wall time since training started.
    pub seconds: f64,
}

impl LogRecord {
    /// The seconds field is left empty unless `timing` is set, so that logs of
    /// identical runs are byte-identical.
    pub fn csv_row(&self, timing: bool) -> String {
        if timing {
            format!("{},{},{:.3}", self.iteration, self.loss, self.seconds)
        } else {
            format!("{},{},", self.iteration, self.loss)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn to_csv(&self, timing: bool) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row(timing));
            s.push('\n');
        }
        s
    }

    /// Mean loss over iterations `first..=last` (1-based, inclusive).
    pub fn mean_loss(&self, first: usize, last: usize) -> Option<f64> {
        let sel: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (first..=last).contains(&r.iteration))
            .map(|r| r.loss)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }

    pub fn total_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_means() {
        let log = RunLog {
            records: (1..=4)
                .map(|i| LogRecord {
                    iteration: i,
                    loss: i as f64,
                    seconds: 0.5 * i as f64,
                })
                .collect(),
        };
        assert_eq!(log.to_csv(false), "iteration,loss,seconds\n1,1,\n2,2,\n3,3,\n4,4,\n");
        assert!(log.to_csv(true).contains("\n2,2,1.000\n"));
        assert_eq!(log.mean_loss(1, 2), Some(1.5));
        assert_eq!(log.mean_loss(3, 10), Some(3.5));
        assert_eq!(log.mean_loss(9, 10), None);
        assert_eq!(log.total_seconds(), 2.0);
    }
}
