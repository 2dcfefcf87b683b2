use ifgmi_core::data::{make_private_dataset, make_public_dataset};
use ifgmi_core::seed;
use serde_json::{json, Value};

use crate::config::Shift;
use crate::error::Result;
use crate::Context;

pub fn run(ctx: &Context) -> Result<Value> {
    let c = &ctx.cfg.corpus;
    let layout = &ctx.layout;
    layout.create(&layout.data())?;

    let private = make_private_dataset(seed::derive(ctx.seed, "corpus-private"), c.identities, c.per_identity)?;
    let (t, m) = layout.private();
    private.save(&t, &m)?;

    let mut shifts: Vec<Shift> = vec![c.shift.clone()];
    for s in &c.also_emit {
        if !shifts.iter().any(|k| k.label() == s.label()) {
            shifts.push(s.clone());
        }
    }
    // one identity stream for every shift level, so corpora differ only by the shift
    let public_seed = seed::derive(ctx.seed, "corpus-public");
    let mut public = Vec::new();
    for shift in &shifts {
        let corpus = make_public_dataset(public_seed, c.public_size, shift.shift_config()?)?;
        let (t, m) = layout.public(shift);
        corpus.save(&t, &m)?;
        public.push(json!({ "shift": shift.label(), "sigma": shift.sigma()?, "checksum": corpus.manifest.checksum }));
    }
    Ok(json!({
        "command": "gen-data",
        "config_hash": ctx.config_hash,
        "private": { "identities": c.identities, "train": private.train.len(), "test": private.test.len(), "checksum": private.manifest.checksum },
        "public": public,
    }))
}
