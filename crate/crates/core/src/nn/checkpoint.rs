//! Parameter checkpoints: one text header line followed by raw little-endian f64s.
//!
//! ```text
//! mlp v1 input=68 hidden=64,64 output=5 activation=tanh step=1200 params=9157
//! <params × 8 bytes>
//! ```

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, ParamTensor};

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub mlp: Mlp,
    pub step: u64,
}

pub fn save_checkpoint<W: Write>(mlp: &Mlp, step: u64, mut out: W) -> Result<()> {
    let spec = mlp.spec();
    let hidden = spec.hidden_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let act = match spec.activation {
        Activation::Tanh => "tanh",
        Activation::Relu => "relu",
    };
    writeln!(
        out,
        "mlp v1 input={} hidden={} output={} activation={} step={} params={}",
        spec.input_dim,
        if hidden.is_empty() { "-" } else { &hidden },
        spec.output_dim,
        act,
        step,
        mlp.n_params()
    )?;
    for v in &mlp.params().values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(mut input: R) -> Result<Checkpoint> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("mlp") || fields.next() != Some("v1") {
        return Err(Error::Parse("not an mlp v1 checkpoint".into()));
    }
    let (mut input_dim, mut hidden, mut output, mut act, mut step, mut n) = (None, None, None, None, None, None);
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field `{f}`")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Parse(format!("bad number in `{f}`")));
        match k {
            "input" => input_dim = Some(num(v)?),
            "hidden" => {
                hidden = Some(if v == "-" {
                    Vec::new()
                } else {
                    v.split(',').map(num).collect::<Result<Vec<_>>>()?
                })
            }
            "output" => output = Some(num(v)?),
            "activation" => {
                act = Some(match v {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    _ => return Err(Error::Parse(format!("unknown activation `{v}`"))),
                })
            }
            "step" => step = Some(num(v)? as u64),
            "params" => n = Some(num(v)?),
            _ => return Err(Error::Parse(format!("unknown header field `{k}`"))),
        }
    }
    let missing = || Error::Parse("incomplete checkpoint header".into());
    let spec = MlpSpec::new(
        input_dim.ok_or_else(missing)?,
        hidden.ok_or_else(missing)?,
        output.ok_or_else(missing)?,
        act.ok_or_else(missing)?,
    );
    let mut params = ParamTensor::zeros(&spec);
    let n = n.ok_or_else(missing)?;
    if n != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: n,
        });
    }
    let mut buf = [0u8; 8];
    for v in params.values.iter_mut() {
        input.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Checkpoint {
        mlp: Mlp::from_params(spec, params)?,
        step: step.ok_or_else(missing)?,
    })
}
