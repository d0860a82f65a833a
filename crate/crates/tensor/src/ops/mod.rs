pub mod activation;
pub(crate) mod conv;
pub(crate) mod dense;
pub(crate) mod loss;
pub(crate) mod norm;
pub(crate) mod pool;
pub(crate) mod reduce;
