//! Graph construction for the triplet-encoder U-Net.
//!
//! [`TunetGraph`] binds a [`TunetParams`] snapshot into an autodiff
//! [`Graph`] as leaves and then builds the encode / fuse / decode
//! pipeline on top of caller-supplied input leaves. All three views
//! run through the same parameter leaves, so weight sharing holds by
//! construction and a single backward pass accumulates the gradient
//! contributions of every view.

use std::collections::HashMap;

use rand::Rng;

use super::{ModelConfig, TunetParams, ViewEmbedding};
use crate::error::{Error, Result};
use crate::phantom::View;
use crate::tensor::graph::{Gradients, Graph, Var};
use crate::tensor::ParamSet;

/// Input leaves for one forward pass. The axial view is mandatory;
/// the other two are optional, giving the 1/2/3-view modes.
#[derive(Debug, Clone, Copy)]
pub struct ViewInputs {
    pub axial: Var,
    pub sagittal: Option<Var>,
    pub coronal: Option<Var>,
}

impl ViewInputs {
    pub fn axial_only(axial: Var) -> Self {
        Self { axial, sagittal: None, coronal: None }
    }

    pub fn view_count(&self) -> usize {
        1 + usize::from(self.sagittal.is_some()) + usize::from(self.coronal.is_some())
    }
}

/// Products of one encoder pass over a single view.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOutput {
    /// Pre-pool activations of the five blocks, finest first.
    pub skips: [Var; 5],
    /// Post-pool latent map, H/32 x W/32.
    pub latent: Var,
    /// Global-average-pooled latent, shape [B, C_lat].
    pub embedding: Var,
}

/// Products of a full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Per-pixel probability map on the axial grid, values in (0,1).
    pub prob: Var,
    pub axial_embedding: Var,
    pub sagittal_embedding: Option<Var>,
    pub coronal_embedding: Option<Var>,
}

impl ForwardOutput {
    pub fn embeddings(&self) -> crate::losses::EmbeddingBatch {
        crate::losses::EmbeddingBatch {
            axial: self.axial_embedding,
            sagittal: self.sagittal_embedding,
            coronal: self.coronal_embedding,
        }
    }
}

/// A parameter snapshot bound into a graph as leaves.
pub struct TunetGraph {
    config: ModelConfig,
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl TunetGraph {
    /// Clone every parameter tensor into `graph` as a leaf.
    pub fn bind(graph: &mut Graph, model: &TunetParams) -> Result<Self> {
        let mut vars = Vec::with_capacity(model.params.len());
        for (_, tensor) in model.params.iter() {
            vars.push(graph.leaf(tensor.clone())?);
        }
        Self::with_leaves(model.config.clone(), &model.params, &vars)
    }

    /// Wire the network over parameter leaves that already live in a
    /// graph (one per entry of `params`, in order). This lets callers
    /// that manage leaves themselves (e.g. gradient checking) reuse
    /// the same network construction.
    pub fn with_leaves(config: ModelConfig, params: &ParamSet, vars: &[Var]) -> Result<Self> {
        config.validate()?;
        if params.len() != vars.len() {
            return Err(Error::Contract(format!(
                "with_leaves: {} parameters but {} leaves",
                params.len(),
                vars.len()
            )));
        }
        let mut names = Vec::with_capacity(params.len());
        let mut index = HashMap::new();
        for (i, (name, _)) in params.iter().enumerate() {
            index.insert(name.to_string(), i);
            names.push(name.to_string());
        }
        Ok(Self { config, names, vars: vars.to_vec(), index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Leaf variables in parameter order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Leaf variable of a named parameter.
    pub fn param_var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|i| self.vars[*i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    fn p(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    /// conv -> relu, with optional dropout afterwards.
    fn conv_unit(
        &self,
        g: &mut Graph,
        x: Var,
        name: &str,
        dropout: bool,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let x = g.conv2d(x, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))?;
        let x = g.relu(x)?;
        if dropout {
            g.dropout(x, self.config.dropout, training, rng)
        } else {
            Ok(x)
        }
    }

    /// Run the shared encoder over one view slice.
    ///
    /// Dropout is active only for the axial role in blocks 4-5 and
    /// only while training; the weights are identical for every role.
    pub fn encode(
        &self,
        g: &mut Graph,
        input: Var,
        role: View,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<EncodeOutput> {
        let shape = g.value(input).shape().to_vec();
        let hw = self.config.input_hw;
        if shape.len() != 4 || shape[1] != self.config.in_channels || shape[2] != hw || shape[3] != hw
        {
            return Err(Error::Shape(format!(
                "encode: expected input [B, {}, {hw}, {hw}], got {shape:?}",
                self.config.in_channels
            )));
        }

        let mut x = input;
        let mut skips = Vec::with_capacity(5);
        for block in 1..=5usize {
            let drop = role == View::Axial && block >= 4;
            for conv in 0..ModelConfig::convs_in_block(block) {
                x = self.conv_unit(g, x, &format!("enc.b{block}.c{conv}"), drop, training, rng)?;
            }
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        let latent = x;
        let embedding = g.global_avg_pool(latent)?;
        let skips: [Var; 5] = skips.try_into().expect("five encoder blocks");
        Ok(EncodeOutput { skips, latent, embedding })
    }

    /// Element-wise mean of 1-3 latent maps (axial first), then the
    /// bottleneck block: three convs with one pool after the first.
    pub fn fuse(&self, g: &mut Graph, latents: &[Var]) -> Result<Var> {
        if latents.is_empty() || latents.len() > 3 {
            return Err(Error::Contract(format!(
                "fuse: expected 1-3 latent maps, got {}",
                latents.len()
            )));
        }
        let mut x = g.mean_stack(latents)?;
        let mut dummy = crate::rng::stream(0, 0);
        x = self.conv_unit(g, x, "bott.c0", false, false, &mut dummy)?;
        x = g.maxpool2(x)?;
        x = self.conv_unit(g, x, "bott.c1", false, false, &mut dummy)?;
        x = self.conv_unit(g, x, "bott.c2", false, false, &mut dummy)?;
        Ok(x)
    }

    /// Decoder: undo the bottleneck pool, then five mirrored up-blocks
    /// concatenating the axial skips, then a 1x1 conv + sigmoid.
    pub fn decode(&self, g: &mut Graph, fused: Var, skips: &[Var; 5]) -> Result<Var> {
        let mut dummy = crate::rng::stream(0, 0);
        let mut x = g.upconv2(fused, self.p("dec.up0.w"), self.p("dec.up0.b"))?;
        x = g.relu(x)?;
        for stage in (1..=5usize).rev() {
            x = g.upconv2(x, self.p(&format!("dec.s{stage}.up.w")), self.p(&format!("dec.s{stage}.up.b")))?;
            x = g.relu(x)?;
            x = g.concat_channels(x, skips[stage - 1])?;
            for conv in 0..ModelConfig::convs_in_block(stage) {
                x = self.conv_unit(g, x, &format!("dec.s{stage}.c{conv}"), false, false, &mut dummy)?;
            }
        }
        let logits = g.conv1x1(x, self.p("head.w"), self.p("head.b"))?;
        g.sigmoid(logits)
    }

    /// Full pass: encode each supplied view with the shared encoder,
    /// fuse the latents, decode on the axial skips.
    pub fn forward(
        &self,
        g: &mut Graph,
        inputs: &ViewInputs,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput> {
        let axial = self.encode(g, inputs.axial, View::Axial, training, rng)?;
        let sagittal = inputs
            .sagittal
            .map(|v| self.encode(g, v, View::Sagittal, training, rng))
            .transpose()?;
        let coronal = inputs
            .coronal
            .map(|v| self.encode(g, v, View::Coronal, training, rng))
            .transpose()?;

        let mut latents = vec![axial.latent];
        if let Some(s) = &sagittal {
            latents.push(s.latent);
        }
        if let Some(c) = &coronal {
            latents.push(c.latent);
        }
        let fused = self.fuse(g, &latents)?;
        let prob = self.decode(g, fused, &axial.skips)?;
        Ok(ForwardOutput {
            prob,
            axial_embedding: axial.embedding,
            sagittal_embedding: sagittal.map(|s| s.embedding),
            coronal_embedding: coronal.map(|c| c.embedding),
        })
    }

    /// Move gradients from a backward pass into the parameter set.
    ///
    /// Parameters that did not participate in the loss (for example
    /// the decoder under a purely contrastive objective) receive a
    /// zero gradient so optimizers see a complete gradient vector.
    pub fn write_back_grads(&self, mut grads: Gradients, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.vars.len() {
            return Err(Error::Contract(format!(
                "write_back_grads: parameter count mismatch ({} vs {})",
                params.len(),
                self.vars.len()
            )));
        }
        for idx in 0..self.vars.len() {
            if params.name_at(idx) != self.names[idx] {
                return Err(Error::Contract(format!(
                    "write_back_grads: parameter order mismatch at {} ({} vs {})",
                    idx,
                    params.name_at(idx),
                    self.names[idx]
                )));
            }
            let numel = params.tensor_at(idx).numel();
            let grad = grads.take(self.vars[idx]).unwrap_or_else(|| vec![0.0; numel]);
            params.tensor_at_mut(idx).set_grad(grad)?;
        }
        Ok(())
    }

    /// Split a [B, C] embedding node into per-sample vectors.
    pub fn embedding_vectors(g: &Graph, var: Var, role: View) -> Result<Vec<ViewEmbedding>> {
        let t = g.value(var);
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embedding must be [B, C], got {shape:?}")));
        }
        Ok(t
            .data()
            .chunks(shape[1])
            .map(|row| ViewEmbedding { role, values: row.to_vec() })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn small_model(seed: u64) -> TunetParams {
        TunetParams::init(ModelConfig { base_channels: 2, ..Default::default() }, seed).unwrap()
    }

    fn image_leaf(g: &mut Graph, b: usize, hw: usize, seed: u64) -> Var {
        let mut rng = stream(seed, 0x77);
        let t = Tensor::rand_uniform(vec![b, 1, hw, hw], 0.0, 1.0, &mut rng).unwrap();
        g.leaf(t).unwrap()
    }

    #[test]
    fn encode_shape_trace_at_base_8() {
        let model = TunetParams::init(ModelConfig::default(), 1).unwrap();
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 2, 64, 1);
        let mut rng = stream(0, 0);
        let out = net.encode(&mut g, x, View::Axial, false, &mut rng).unwrap();

        let expect = [
            vec![2, 8, 64, 64],
            vec![2, 16, 32, 32],
            vec![2, 32, 16, 16],
            vec![2, 64, 8, 8],
            vec![2, 128, 4, 4],
        ];
        for (skip, shape) in out.skips.iter().zip(&expect) {
            assert_eq!(g.value(*skip).shape(), &shape[..]);
        }
        assert_eq!(g.value(out.latent).shape(), &[2, 128, 2, 2]);
        assert_eq!(g.value(out.embedding).shape(), &[2, 128]);
    }

    #[test]
    fn encode_rejects_wrong_extent() {
        let model = small_model(1);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 1, 32, 1);
        let mut rng = stream(0, 0);
        assert!(matches!(
            net.encode(&mut g, x, View::Axial, false, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn roles_share_weights_in_eval_mode() {
        let model = small_model(2);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 1, 64, 5);
        let mut rng = stream(0, 0);
        let ax = net.encode(&mut g, x, View::Axial, false, &mut rng).unwrap();
        let sag = net.encode(&mut g, x, View::Sagittal, false, &mut rng).unwrap();
        assert_eq!(g.value(ax.latent).data(), g.value(sag.latent).data());
        assert_eq!(g.value(ax.embedding).data(), g.value(sag.embedding).data());
    }

    #[test]
    fn fuse_of_three_identical_latents_matches_single() {
        let model = small_model(3);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 1, 64, 9);
        let mut rng = stream(0, 0);
        let enc = net.encode(&mut g, x, View::Axial, false, &mut rng).unwrap();
        let one = net.fuse(&mut g, &[enc.latent]).unwrap();
        let three = net.fuse(&mut g, &[enc.latent, enc.latent, enc.latent]).unwrap();
        assert_eq!(g.value(one).data(), g.value(three).data());
    }

    #[test]
    fn fuse_of_opposite_latents_equals_bottleneck_of_zero() {
        let model = small_model(4);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 1, 64, 11);
        let mut rng = stream(0, 0);
        let enc = net.encode(&mut g, x, View::Axial, false, &mut rng).unwrap();
        let neg = g.scale(enc.latent, -1.0).unwrap();
        let fused = net.fuse(&mut g, &[enc.latent, neg]).unwrap();

        let zero = Tensor::zeros(g.value(enc.latent).shape().to_vec()).unwrap();
        let zero = g.leaf(zero).unwrap();
        let reference = net.fuse(&mut g, &[zero]).unwrap();
        for (a, b) in g.value(fused).data().iter().zip(g.value(reference).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_arity_bounds_are_enforced() {
        let model = small_model(5);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 1, 64, 2);
        let mut rng = stream(0, 0);
        let enc = net.encode(&mut g, x, View::Axial, false, &mut rng).unwrap();
        assert!(matches!(net.fuse(&mut g, &[]), Err(Error::Contract(_))));
        let four = [enc.latent; 4];
        assert!(matches!(net.fuse(&mut g, &four), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_output_is_probability_map_of_input_shape() {
        let model = small_model(6);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let ax = image_leaf(&mut g, 2, 64, 21);
        let sag = image_leaf(&mut g, 2, 64, 22);
        let cor = image_leaf(&mut g, 2, 64, 23);
        let mut rng = stream(0, 0);
        let out = net
            .forward(
                &mut g,
                &ViewInputs { axial: ax, sagittal: Some(sag), coronal: Some(cor) },
                false,
                &mut rng,
            )
            .unwrap();
        assert_eq!(g.value(out.prob).shape(), &[2, 1, 64, 64]);
        assert!(g.value(out.prob).data().iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!(out.sagittal_embedding.is_some() && out.coronal_embedding.is_some());
    }

    #[test]
    fn single_view_forward_leaves_absent_views_out_of_the_graph() {
        let model = small_model(7);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let ax = image_leaf(&mut g, 1, 64, 31);
        let sag = image_leaf(&mut g, 1, 64, 32); // a leaf nothing consumes
        let mut rng = stream(0, 0);
        let out = net.forward(&mut g, &ViewInputs::axial_only(ax), false, &mut rng).unwrap();
        assert!(out.sagittal_embedding.is_none());

        let loss = g.mean_all(out.prob).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(sag).is_none(), "unused view must receive no gradient");
        assert!(grads.get(ax).is_some());
    }

    #[test]
    fn three_view_forward_routes_gradient_through_side_views() {
        let model = small_model(8);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let ax = image_leaf(&mut g, 1, 64, 41);
        let sag = image_leaf(&mut g, 1, 64, 42);
        let cor = image_leaf(&mut g, 1, 64, 43);
        let mut rng = stream(0, 0);
        let out = net
            .forward(
                &mut g,
                &ViewInputs { axial: ax, sagittal: Some(sag), coronal: Some(cor) },
                false,
                &mut rng,
            )
            .unwrap();
        let loss = g.mean_all(out.prob).unwrap();
        let grads = g.backward(loss).unwrap();
        let sag_grad = grads.get(sag).expect("side view feeds the bottleneck");
        assert!(sag_grad.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn side_view_weight_gradient_matches_finite_difference() {
        // Perturb one encoder weight element and compare the measured
        // change of the mean output against the analytic gradient. The
        // encoder is shared, so this exercises the sagittal path too.
        // The mean is evaluated in f64 over the probability map so the
        // finite difference is not quantized away by the f32 scalar.
        let model = small_model(9);
        let name = "enc.b5.c2.w";

        let run = |m: &TunetParams| -> (f64, Option<Vec<f32>>) {
            let mut g = Graph::new();
            let net = TunetGraph::bind(&mut g, m).unwrap();
            let ax = image_leaf(&mut g, 1, 64, 51);
            let sag = image_leaf(&mut g, 1, 64, 52);
            let mut rng = stream(0, 0);
            let out = net
                .forward(
                    &mut g,
                    &ViewInputs { axial: ax, sagittal: Some(sag), coronal: None },
                    false,
                    &mut rng,
                )
                .unwrap();
            let prob = g.value(out.prob);
            let value =
                prob.data().iter().map(|v| *v as f64).sum::<f64>() / prob.numel() as f64;
            let loss = g.mean_all(out.prob).unwrap();
            let grads = g.backward(loss).unwrap();
            let w = net.param_var(name).unwrap();
            let grad = grads.get(w).map(|v| v.to_vec());
            (value, grad)
        };

        let (_, grad) = run(&model);
        let grad = grad.expect("weight participates in the loss");
        // Probe the element with the strongest influence on the output.
        let elem = grad
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        let analytic = grad[elem] as f64;
        assert!(analytic != 0.0);

        // Step sized for an f32 forward: large enough that the output
        // change clears accumulated rounding, small enough to stay in
        // the linear regime of a weight with init scale ~0.08.
        let eps = 5e-3f64;
        let idx = model.params.names().iter().position(|n| *n == name).unwrap();
        let orig = model.params.tensor_at(idx).data()[elem] as f64;
        let mut plus = model.clone();
        plus.params.tensor_at_mut(idx).data_mut()[elem] = (orig + eps) as f32;
        let mut minus = model.clone();
        minus.params.tensor_at_mut(idx).data_mut()[elem] = (orig - eps) as f32;
        // Use the step the f32 parameters actually realized.
        let step = plus.params.tensor_at(idx).data()[elem] as f64
            - minus.params.tensor_at(idx).data()[elem] as f64;
        let (fp, _) = run(&plus);
        let (fm, _) = run(&minus);
        let fd = (fp - fm) / step;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-2, "analytic {analytic} vs finite difference {fd} (rel {rel})");
    }

    #[test]
    fn training_dropout_is_reproducible_per_seed() {
        let model = small_model(10);
        let run = |seed: u64| -> Vec<f32> {
            let mut g = Graph::new();
            let net = TunetGraph::bind(&mut g, &model).unwrap();
            let ax = image_leaf(&mut g, 1, 64, 61);
            let mut rng = stream(seed, 0x99);
            let out = net.forward(&mut g, &ViewInputs::axial_only(ax), true, &mut rng).unwrap();
            g.value(out.prob).data().to_vec()
        };
        assert_eq!(run(4), run(4), "same dropout stream must reproduce bit-exactly");
        assert_ne!(run(4), run(5), "different dropout stream should change the output");
    }

    #[test]
    fn eval_mode_ignores_the_rng() {
        let model = small_model(11);
        let run = |seed: u64| -> Vec<f32> {
            let mut g = Graph::new();
            let net = TunetGraph::bind(&mut g, &model).unwrap();
            let ax = image_leaf(&mut g, 1, 64, 62);
            let mut rng = stream(seed, 0x99);
            let out = net.forward(&mut g, &ViewInputs::axial_only(ax), false, &mut rng).unwrap();
            g.value(out.prob).data().to_vec()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn write_back_grads_fills_unused_parameters_with_zeros() {
        let model = small_model(12);
        let mut params = model.params.clone();
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let ax = image_leaf(&mut g, 1, 64, 71);
        let mut rng = stream(0, 0);
        let out = net.forward(&mut g, &ViewInputs::axial_only(ax), false, &mut rng).unwrap();

        // A loss touching only the embedding leaves the decoder unused.
        let loss = g.mean_all(out.axial_embedding).unwrap();
        let grads = g.backward(loss).unwrap();
        net.write_back_grads(grads, &mut params).unwrap();

        let enc = params.get("enc.b1.c0.w").unwrap().grad().unwrap();
        assert!(enc.iter().any(|v| *v != 0.0), "encoder feeds the embedding");
        let head = params.get("head.w").unwrap().grad().unwrap();
        assert!(head.iter().all(|v| *v == 0.0), "head is off the loss path");
    }

    #[test]
    fn full_loss_reaches_every_parameter() {
        let model = small_model(13);
        let mut params = model.params.clone();
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let ax = image_leaf(&mut g, 1, 64, 81);
        let mut rng = stream(0, 0);
        let out = net.forward(&mut g, &ViewInputs::axial_only(ax), false, &mut rng).unwrap();
        let loss = g.mean_all(out.prob).unwrap();
        let grads = g.backward(loss).unwrap();
        net.write_back_grads(grads, &mut params).unwrap();
        for (name, t) in params.iter() {
            let grad = t.grad().expect("gradient present");
            assert!(
                grad.iter().any(|v| *v != 0.0),
                "parameter {name} should receive gradient from the mask loss"
            );
        }
    }

    #[test]
    fn embedding_vectors_split_batches_per_sample() {
        let model = small_model(14);
        let mut g = Graph::new();
        let net = TunetGraph::bind(&mut g, &model).unwrap();
        let x = image_leaf(&mut g, 3, 64, 91);
        let mut rng = stream(0, 0);
        let enc = net.encode(&mut g, x, View::Coronal, false, &mut rng).unwrap();
        let embs = TunetGraph::embedding_vectors(&g, enc.embedding, View::Coronal).unwrap();
        assert_eq!(embs.len(), 3);
        let lat = net.config().latent_channels();
        assert!(embs.iter().all(|e| e.values.len() == lat && e.role == View::Coronal));
    }
}
