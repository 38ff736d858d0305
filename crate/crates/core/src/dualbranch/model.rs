use crate::error::{Error, Result};
use crate::losses::{asl_loss, contrastive_loss, normalize_backward, normalize_rows_lenient, total_loss, AslParams, LossValue};
use crate::numerics::{Matrix, SeededRng};
use crate::zeroshot::class_probability_posneg;

/// Initial contrastive temperature.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// Trainable projection heads shared by the contrastive and ASL branches.
///
/// `asl_scale` and `asl_bias` map image/class-text cosine similarities to
/// ASL logits during training only; no inference path reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchModel {
    pub w_img: Matrix,
    pub w_txt: Matrix,
    pub log_temperature: f64,
    pub asl_scale: f64,
    pub asl_bias: f64,
}

/// Names of the parameter blocks in flattening order.
pub const PARAMETER_NAMES: [&str; 5] = ["w_img", "w_txt", "log_temperature", "asl_scale", "asl_bias"];

impl DualBranchModel {
    /// Gaussian heads with variance `1 / fan_in`.
    pub fn random(img_dim: usize, txt_dim: usize, joint_dim: usize, seed: u64) -> Result<Self> {
        if img_dim == 0 || txt_dim == 0 || joint_dim == 0 {
            return Err(Error::invalid("model dims", "must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let mut draw = |rows: usize, cols: usize| {
            let scale = 1.0 / (rows as f64).sqrt();
            Matrix::new(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect())
        };
        Ok(Self {
            w_img: draw(img_dim, joint_dim)?,
            w_txt: draw(txt_dim, joint_dim)?,
            log_temperature: INITIAL_TEMPERATURE.ln(),
            asl_scale: 10.0,
            asl_bias: -2.0,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn img_dim(&self) -> usize {
        self.w_img.rows()
    }

    pub fn txt_dim(&self) -> usize {
        self.w_txt.rows()
    }

    pub fn joint_dim(&self) -> usize {
        self.w_img.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_img.cols() != self.w_txt.cols() {
            return Err(Error::shape("DualBranchModel joint dim", self.w_img.cols(), self.w_txt.cols()));
        }
        for (name, v) in [
            ("log_temperature", self.log_temperature),
            ("asl_scale", self.asl_scale),
            ("asl_bias", self.asl_bias),
        ] {
            if !v.is_finite() || (name == "log_temperature" && !self.temperature().is_finite()) {
                return Err(Error::invalid(name, format!("{v} is not finite")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w_img.as_slice().len() + self.w_txt.as_slice().len() + 3
    }

    /// Flattens parameters in [`PARAMETER_NAMES`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w_img.as_slice());
        v.extend_from_slice(self.w_txt.as_slice());
        v.extend([self.log_temperature, self.asl_scale, self.asl_bias]);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec), keeping this model's shapes.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.num_params() {
            return Err(Error::shape("DualBranchModel params", self.num_params(), params.len()));
        }
        let a = self.w_img.as_slice().len();
        let b = a + self.w_txt.as_slice().len();
        Ok(Self {
            w_img: Matrix::new(self.w_img.rows(), self.w_img.cols(), params[..a].to_vec())?,
            w_txt: Matrix::new(self.w_txt.rows(), self.w_txt.cols(), params[a..b].to_vec())?,
            log_temperature: params[b],
            asl_scale: params[b + 1],
            asl_bias: params[b + 2],
        })
    }

    /// Unit-norm joint-space image embeddings.
    pub fn project_images(&self, img_features: &Matrix) -> Result<Matrix> {
        Ok(normalize_rows_lenient(&img_features.matmul(&self.w_img)?))
    }

    /// Unit-norm joint-space text embeddings.
    pub fn project_texts(&self, txt_features: &Matrix) -> Result<Matrix> {
        Ok(normalize_rows_lenient(&txt_features.matmul(&self.w_txt)?))
    }

    /// Zero-shot class logits `cos(image, class text) / τ`.
    pub fn zero_shot_logits(&self, img_features: &Matrix, class_txt: &Matrix) -> Result<Matrix> {
        let img = self.project_images(img_features)?;
        let cls = self.project_texts(class_txt)?;
        Ok(img.matmul_t(&cls)?.scaled(1.0 / self.temperature()))
    }

    /// Paired positive/negative prompt probabilities in the joint space.
    pub fn zero_shot_probabilities(&self, img_features: &Matrix, pos_txt: &Matrix, neg_txt: &Matrix) -> Result<Matrix> {
        let img = self.project_images(img_features)?;
        let pos = self.project_texts(pos_txt)?;
        let neg = self.project_texts(neg_txt)?;
        class_probability_posneg(&img, &pos, &neg, self.temperature())
    }
}

/// Loss of one batch with its branch components.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Total loss; gradient blocks follow [`PARAMETER_NAMES`], scalars as 1x1.
    pub loss: LossValue,
    pub loss_con: f64,
    pub loss_asl: f64,
}

impl ForwardOutput {
    /// Gradient flattened in the model's parameter order.
    pub fn flat_gradient(&self) -> Vec<f64> {
        self.loss.grads.iter().flat_map(|g| g.as_slice().iter().copied()).collect()
    }
}

/// Contrastive loss between projected image and report features plus
/// `alpha` times the asymmetric loss on `scale · cos(image, class text) + bias`.
pub fn forward(
    model: &DualBranchModel,
    img_features: &Matrix,
    txt_features: &Matrix,
    class_txt_features: &Matrix,
    labels: &Matrix,
    alpha: f64,
    asl: &AslParams,
) -> Result<ForwardOutput> {
    model.validate()?;
    let b = img_features.rows();
    if txt_features.rows() != b || labels.rows() != b {
        return Err(Error::shape("forward batch", b, format!("{} texts, {} label rows", txt_features.rows(), labels.rows())));
    }
    if labels.cols() != class_txt_features.rows() {
        return Err(Error::shape("forward classes", class_txt_features.rows(), labels.cols()));
    }
    if img_features.cols() != model.img_dim() {
        return Err(Error::shape("forward image features", model.img_dim(), img_features.cols()));
    }
    if txt_features.cols() != model.txt_dim() || class_txt_features.cols() != model.txt_dim() {
        return Err(Error::shape("forward text features", model.txt_dim(), txt_features.cols()));
    }

    let tau = model.temperature();
    let z_img = img_features.matmul(&model.w_img)?;
    let z_txt = txt_features.matmul(&model.w_txt)?;
    let z_cls = class_txt_features.matmul(&model.w_txt)?;

    // contrastive branch
    let con = contrastive_loss(&z_img, &z_txt, tau)?;
    let con_grads = vec![
        img_features.t_matmul(&con.grads[0])?,
        txt_features.t_matmul(&con.grads[1])?,
        Matrix::scalar(con.grads[2].get(0, 0) * tau),
        Matrix::scalar(0.0),
        Matrix::scalar(0.0),
    ];

    // ASL branch
    let u_img = normalize_rows_lenient(&z_img);
    let u_cls = normalize_rows_lenient(&z_cls);
    let cos = u_img.matmul_t(&u_cls)?;
    let logits = cos.map(|c| model.asl_scale * c + model.asl_bias);
    let asl_value = asl_loss(&logits, labels, asl)?;
    let g = asl_value.grad();
    let d_scale: f64 = g.as_slice().iter().zip(cos.as_slice()).map(|(a, c)| a * c).sum();
    let d_bias = g.sum();
    let d_cos = g.scaled(model.asl_scale);
    let d_u_img = d_cos.matmul(&u_cls)?;
    let d_u_cls = d_cos.t_matmul(&u_img)?;
    let d_z_img = normalize_backward(&z_img, &u_img, &d_u_img);
    let d_z_cls = normalize_backward(&z_cls, &u_cls, &d_u_cls);
    let asl_grads = vec![
        img_features.t_matmul(&d_z_img)?,
        class_txt_features.t_matmul(&d_z_cls)?,
        Matrix::scalar(0.0),
        Matrix::scalar(d_scale),
        Matrix::scalar(d_bias),
    ];

    let con_lv = LossValue {
        value: con.value,
        grads: con_grads,
    };
    let asl_lv = LossValue {
        value: asl_value.value,
        grads: asl_grads,
    };
    let loss = total_loss(&con_lv, &asl_lv, alpha)?;
    Ok(ForwardOutput {
        loss,
        loss_con: con_lv.value,
        loss_asl: asl_lv.value,
    })
}
