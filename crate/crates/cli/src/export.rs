use std::io::Write;

use crate::error::CliError;
use crate::predict::{load_model, open_output};
use crate::ExportArgs;

/// One row per phoneme: the symbol, then its embedding values. Values print
/// in the shortest form that parses back to the same 32-bit float.
pub fn render(model: &g2p::Model<f32>) -> String {
    let mut s = String::new();
    for (symbol, values) in model.phoneme_embeddings() {
        s.push_str(&symbol);
        for v in values {
            s.push('\t');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn run(args: &ExportArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let mut out = open_output(&args.output)?;
    out.write_all(render(&model).as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(&args.output, e))
}
