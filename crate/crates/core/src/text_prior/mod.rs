//! Text prompts, the image encoder and the cross-modal prior that produces the
//! guide matrix.

mod aligner;
mod image_encoder;
mod prompt;
mod text_encoder;

pub use aligner::{
    attention_graph, encode_image, guide_graph, guide_matrix, similarity_graph, similarity_weights, spatial_attention,
    AttentionMatrix, GuideMatrix, ImageFeatures, PriorAligner, PriorVars, SimilarityProjection, SimilarityWeights, NORM_EPS,
};
pub use image_encoder::{EncoderBlock, EncoderConfig, ImageEncoder};
pub use prompt::{
    extract_text, generate_prompts, template_prompt, LlmClient, LlmConfig, PromptMode, PromptSource, TextPrompt,
    DEFAULT_MODEL, DEFAULT_TIMEOUT, ENDPOINT_ENV, KEY_ENV,
};
pub use text_encoder::{tokenize, HashTextEncoder, TextEmbedding, DEFAULT_TEXT_DIM};
