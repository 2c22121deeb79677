//! Direct and iterative multi-step prediction.
//!
//! A direct forecast at horizon `h` is one forward pass of a model trained
//! for `h`. An iterative forecast applies a one-step model `h` times,
//! appending each normalized output to the window and dropping its oldest
//! row.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::data::{denormalize, MinMaxScaler, WindowedDataset};
use crate::error::{Error, Result};

/// Forecasts up to this many minutes ahead count as short-term.
pub const SHORT_TERM_MINUTES: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Direct,
    Iterative,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Iterative => "iterative",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Method::Direct),
            "iterative" => Ok(Method::Iterative),
            _ => Err(Error::Validation(format!("unknown forecast method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Short,
    Long,
}

/// `h * interval <= 30` minutes is short-term.
pub fn classify_horizon(horizon: usize, interval_minutes: u32) -> Term {
    if horizon as u64 * interval_minutes as u64 <= SHORT_TERM_MINUTES as u64 {
        Term::Short
    } else {
        Term::Long
    }
}

/// Anything that maps normalized windows `[B, m, N]` to normalized
/// predictions `[B, N]` at a fixed horizon.
pub trait Predictor {
    fn window(&self) -> usize;
    fn horizon(&self) -> usize;
    fn num_sites(&self) -> usize;
    fn predict_normalized(&self, windows: &Tensor) -> Result<Tensor>;
}

impl Predictor for Checkpoint {
    fn window(&self) -> usize {
        self.config.window
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn num_sites(&self) -> usize {
        self.site_order.len()
    }

    fn predict_normalized(&self, windows: &Tensor) -> Result<Tensor> {
        self.model.predict(&self.a_hat, windows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRequest {
    /// Normalized history `[m, N]` ending at the forecast origin.
    pub window: Tensor,
    pub horizon: usize,
    pub method: Method,
    pub interval_minutes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Model output in the scaled domain, one value per site.
    pub normalized: Tensor,
    /// Denormalized, unrounded counts; metrics use these.
    pub values: Tensor,
    /// Normalized one-step outputs of an iterative roll-out, in order.
    pub trajectory: Vec<Tensor>,
}

impl Forecast {
    /// Counts as reported to users: clamped to `[0, capacity]` when
    /// capacities are known, then rounded.
    pub fn reported(&self, capacities: Option<&[f64]>) -> Vec<f64> {
        report_counts(self.values.data(), capacities)
    }
}

pub fn report_counts(values: &[f64], capacities: Option<&[f64]>) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| match capacities {
            Some(c) => v.clamp(0.0, c[i]),
            None => v,
        })
        .map(f64::round)
        .collect()
}

fn check_model(model: &dyn Predictor, window: usize, sites: usize, horizon: usize, method: Method) -> Result<()> {
    if horizon < 1 {
        return Err(Error::Contract("horizon must be at least one step".into()));
    }
    let needed = match method {
        Method::Direct => horizon,
        Method::Iterative => 1,
    };
    if model.horizon() != needed {
        return Err(Error::Contract(format!(
            "{method} forecast at h={horizon} needs a model trained for h={needed}, got h={}",
            model.horizon()
        )));
    }
    if model.window() != window || model.num_sites() != sites {
        return Err(Error::Contract(format!(
            "model expects windows of {} x {}, got {window} x {sites}",
            model.window(),
            model.num_sites()
        )));
    }
    Ok(())
}

/// Rolls a one-step model `steps` times over windows `[B, m, N]`, returning
/// every intermediate normalized output.
pub fn roll_out(model: &dyn Predictor, windows: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    let (b, m, n) = match *windows.shape() {
        [b, m, n] => (b, m, n),
        ref other => return Err(Error::shape("roll_out", other, &[0, 0, 0])),
    };
    let mut current = windows.clone();
    let mut outputs = Vec::with_capacity(steps);
    for step in 0..steps {
        let pred = model.predict_normalized(&current)?;
        if step + 1 < steps {
            let mut next = Vec::with_capacity(b * m * n);
            for (w, p) in current.data().chunks(m * n).zip(pred.data().chunks(n)) {
                next.extend_from_slice(&w[n..]);
                next.extend_from_slice(p);
            }
            current = Tensor::new(&[b, m, n], next)?;
        }
        outputs.push(pred);
    }
    Ok(outputs)
}

fn single(request: &ForecastRequest) -> Result<Tensor> {
    let (m, n) = request.window.dims2()?;
    request.window.reshape(&[1, m, n])
}

pub fn direct_predict(model: &dyn Predictor, request: &ForecastRequest, scaler: &MinMaxScaler) -> Result<Forecast> {
    let (m, n) = request.window.dims2()?;
    check_model(model, m, n, request.horizon, Method::Direct)?;
    let out = model.predict_normalized(&single(request)?)?;
    let normalized = out.reshape(&[n])?;
    Ok(Forecast {
        values: denormalize(&normalized, scaler)?,
        normalized,
        trajectory: Vec::new(),
    })
}

pub fn iterative_predict(model_h1: &dyn Predictor, request: &ForecastRequest, scaler: &MinMaxScaler) -> Result<Forecast> {
    let (m, n) = request.window.dims2()?;
    check_model(model_h1, m, n, request.horizon, Method::Iterative)?;
    let trajectory: Vec<Tensor> = roll_out(model_h1, &single(request)?, request.horizon)?
        .into_iter()
        .map(|t| t.reshape(&[n]))
        .collect::<Result<_>>()?;
    let normalized = trajectory.last().unwrap().clone();
    Ok(Forecast {
        values: denormalize(&normalized, scaler)?,
        normalized,
        trajectory,
    })
}

/// Dispatches on the request's method.
pub fn predict(model: &dyn Predictor, request: &ForecastRequest, scaler: &MinMaxScaler) -> Result<Forecast> {
    match request.method {
        Method::Direct => direct_predict(model, request, scaler),
        Method::Iterative => iterative_predict(model, request, scaler),
    }
}

/// Denormalized predictions `[S, N]` for every sample of `test`, row-aligned
/// with `test.targets()`. The dataset's horizon is the forecast horizon.
pub fn batch_forecast(model: &dyn Predictor, test: &WindowedDataset, method: Method, scaler: &MinMaxScaler) -> Result<Tensor> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    check_model(model, test.window(), test.num_sites(), test.horizon(), method)?;
    let normalized = match method {
        Method::Direct => model.predict_normalized(test.inputs())?,
        Method::Iterative => roll_out(model, test.inputs(), test.horizon())?.pop().unwrap(),
    };
    denormalize(&normalized, scaler)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Predicts the last row of the window plus a constant.
    struct Persistence {
        m: usize,
        n: usize,
        h: usize,
        bias: f64,
    }

    impl Predictor for Persistence {
        fn window(&self) -> usize {
            self.m
        }
        fn horizon(&self) -> usize {
            self.h
        }
        fn num_sites(&self) -> usize {
            self.n
        }
        fn predict_normalized(&self, w: &Tensor) -> Result<Tensor> {
            let b = w.shape()[0];
            let (m, n) = (self.m, self.n);
            let data = (0..b)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| w.data()[(i * m + m - 1) * n + j] + self.bias)
                .collect();
            Tensor::matrix(b, n, data)
        }
    }

    fn unit_scaler(n: usize) -> MinMaxScaler {
        MinMaxScaler {
            columns: vec![(0.0, 100.0); n],
        }
    }

    #[test]
    fn horizon_classes() {
        assert_eq!(classify_horizon(6, 5), Term::Short);
        assert_eq!(classify_horizon(9, 5), Term::Long);
        assert_eq!(classify_horizon(1, 30), Term::Short);
        assert_eq!(classify_horizon(1, 45), Term::Long);
    }

    #[test]
    fn constant_window_is_a_fixed_point() {
        let model = Persistence { m: 4, n: 2, h: 1, bias: 0.0 };
        let req = ForecastRequest {
            window: Tensor::full(&[4, 2], 0.25),
            horizon: 1,
            method: Method::Direct,
            interval_minutes: 5,
        };
        let f = direct_predict(&model, &req, &unit_scaler(2)).unwrap();
        assert_eq!(f.values.data(), &[25.0, 25.0]);
        let it = iterative_predict(&model, &ForecastRequest { horizon: 7, ..req.clone() }, &unit_scaler(2)).unwrap();
        assert_eq!(it.values.data(), &[25.0, 25.0]);
        assert_eq!(it.trajectory.len(), 7);
    }

    #[test]
    fn bias_accumulates_in_roll_out() {
        let model = Persistence { m: 3, n: 1, h: 1, bias: 0.01 };
        let req = ForecastRequest {
            window: Tensor::full(&[3, 1], 0.5),
            horizon: 5,
            method: Method::Iterative,
            interval_minutes: 5,
        };
        let f = predict(&model, &req, &unit_scaler(1)).unwrap();
        for (k, t) in f.trajectory.iter().enumerate() {
            assert!((t.data()[0] - (0.5 + 0.01 * (k + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_and_shape_mismatches_are_contract_errors() {
        let model = Persistence { m: 3, n: 2, h: 3, bias: 0.0 };
        let req = ForecastRequest {
            window: Tensor::zeros(&[3, 2]),
            horizon: 1,
            method: Method::Direct,
            interval_minutes: 5,
        };
        assert!(matches!(direct_predict(&model, &req, &unit_scaler(2)), Err(Error::Contract(_))));
        // iterative needs a one-step model
        let req = ForecastRequest { horizon: 3, method: Method::Iterative, ..req };
        assert!(matches!(iterative_predict(&model, &req, &unit_scaler(2)), Err(Error::Contract(_))));
        let wrong_window = ForecastRequest {
            window: Tensor::zeros(&[4, 2]),
            method: Method::Direct,
            ..req
        };
        assert!(matches!(direct_predict(&model, &wrong_window, &unit_scaler(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn reporting_clamps_then_rounds() {
        let raw = [-2.4, 7.6, 130.2];
        assert_eq!(report_counts(&raw, Some(&[10.0, 10.0, 120.0])), vec![0.0, 8.0, 120.0]);
        assert_eq!(report_counts(&raw, None), vec![-2.0, 8.0, 130.0]);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("direct".parse::<Method>().unwrap(), Method::Direct);
        assert_eq!(Method::Iterative.to_string(), "iterative");
        assert!("recursive".parse::<Method>().is_err());
    }
}
