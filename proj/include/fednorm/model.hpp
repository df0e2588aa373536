#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fednorm/normalization.hpp"
#include "fednorm/ops.hpp"
#include "fednorm/tape.hpp"
#include "fednorm/tensor.hpp"

namespace fednorm {

struct DenseLayer {
    std::size_t units = 0;
    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct ConvLayer {
    std::size_t channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct PoolLayer {
    std::size_t window = 2;
    std::size_t stride = 2;
    friend bool operator==(const PoolLayer&, const PoolLayer&) = default;
};

struct FlattenLayer {
    friend bool operator==(const FlattenLayer&, const FlattenLayer&) = default;
};

enum class ResidualVariant {
    plain,           // rho(x + A2 rho A1 x)
    ln_inner,        // n_MV rho(x + A2 n_MV rho A1 x)
    ln_shift,        // s rho(x + A2 n_MV rho A1 x)
    fn_inner_mv,     // rho(x + A2 n_MV rho A1 x)
    fn_inner_scale,  // rho(x + A2 n rho A1 x)
};

/// Two square affine maps A1, A2 on a width-d vector with a skip connection.
struct ResidualLayer {
    ResidualVariant variant = ResidualVariant::plain;
    friend bool operator==(const ResidualLayer&, const ResidualLayer&) = default;
};

using LayerSpec = std::variant<DenseLayer, ConvLayer, PoolLayer, FlattenLayer, ResidualLayer>;

enum class NormMode {
    none,
    fn_layerwise,  // scale norm after every activation
    fn_last,       // scale norm on the feature only
    ln_layerwise,  // MV norm after every activation
    ln_reduced,    // mean shift after inner activations, MV norm on the feature
    ln_pre,        // MV norm before every activation
    ln_learnable,  // gamma * n_MV + beta after every activation
    gn,            // group norm after every activation
    bn,            // batch norm after every activation
};

enum class BiasPolicy { all_biases, first_layer_only, none };

std::string to_string(NormMode m);
std::string to_string(BiasPolicy p);
std::string to_string(ResidualVariant v);
NormMode parse_norm_mode(const std::string& s);
BiasPolicy parse_bias_policy(const std::string& s);
ResidualVariant parse_residual_variant(const std::string& s);

/// Whether the mode's equivalence results need bias-free layers after the first.
bool requires_bias_free_inner_layers(NormMode m);

struct NetworkSpec {
    Shape input_shape;  // per-sample shape, e.g. {16} or {3, 32, 32}
    std::vector<LayerSpec> layers;
    Activation activation = Activation::relu();
    NormMode norm_mode = NormMode::none;
    std::size_t gn_groups = 2;
    BiasPolicy bias_policy = BiasPolicy::first_layer_only;
    std::size_t num_classes = 10;
    double bn_momentum = 0.1;
    /// Permits inner biases under modes that normally forbid them; used to
    /// search for counterexamples to the reductions.
    bool relax_bias_assumption = false;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Throws ConfigError (or ShapeError for inconsistent layer shapes).
void validate(const NetworkSpec& spec);

/// Per-sample feature dimension d_L feeding the classifier.
std::size_t feature_dim(const NetworkSpec& spec);

enum class ParamKind { weight, bias, norm_scale, norm_shift, bn_running_mean, bn_running_var, classifier };

std::string to_string(ParamKind k);
ParamKind parse_param_kind(const std::string& s);
inline bool is_trainable(ParamKind k) {
    return k != ParamKind::bn_running_mean && k != ParamKind::bn_running_var;
}

struct ParamEntry {
    std::string name;
    ParamKind kind = ParamKind::weight;
    Tensor value;
    friend bool operator==(const ParamEntry&, const ParamEntry&) = default;
};

/// Ordered parameters and running statistics of one model.
class ParamSet {
public:
    std::vector<ParamEntry> entries;

    std::size_t size() const { return entries.size(); }
    ParamEntry& operator[](std::size_t i) { return entries[i]; }
    const ParamEntry& operator[](std::size_t i) const { return entries[i]; }
    const ParamEntry* find(const std::string& name) const;
    ParamEntry* find(const std::string& name);
    std::size_t index_of(const std::string& name) const;

    /// Scalar count of trainable entries.
    std::size_t trainable_count() const;
    /// Same names, kinds and shapes.
    bool same_layout(const ParamSet& other) const;
    /// Zero tensors with this set's layout.
    ParamSet zeros_like() const;

    friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

struct ForwardOptions {
    bool training = false;
    /// Stabilizer for every normalization. 0 is exact mode: degenerate
    /// inputs throw DegenerateInputError.
    double epsilon = kDefaultEpsilon;
    /// Record parameters as differentiable tape parameters.
    bool differentiable = false;
};

struct ForwardResult {
    Var logits;    // [B x C]
    Var features;  // [B x d_L]
    /// Tape handles aligned with ParamSet entries.
    std::vector<Var> params;
};

struct BuildOptions;

class Model {
public:
    Model() = default;
    Model(NetworkSpec spec, ParamSet params);

    const NetworkSpec& spec() const { return spec_; }
    const ParamSet& params() const { return params_; }
    ParamSet& params() { return params_; }

    /// Inputs are [B x input_shape...] or a single sample of input_shape.
    /// Training mode updates batch-norm running statistics in place.
    ForwardResult forward(Tape& tape, const Tensor& inputs, const ForwardOptions& options = {});
    /// Forward with caller-recorded parameter handles aligned with params();
    /// the handles' values are used instead of the stored parameters.
    ForwardResult forward(Tape& tape, const Tensor& inputs, std::span<const Var> param_vars,
                          const ForwardOptions& options = {});
    /// Eval-mode logits and features without gradients.
    std::pair<Tensor, Tensor> predict(const Tensor& inputs, double epsilon = kDefaultEpsilon) const;

    /// Same parameters, wired according to a different normalization mode.
    Model with_norm_mode(NormMode mode) const;

private:
    struct Unchecked {};
    Model(NetworkSpec spec, ParamSet params, Unchecked) : spec_(std::move(spec)), params_(std::move(params)) {}
    friend Model build(const NetworkSpec& spec, std::uint64_t seed, const BuildOptions& options);

    /// Shared forward; running statistics go to `bn_sink` when non-null.
    ForwardResult run(Tape& tape, const Tensor& inputs, std::span<const Var> param_vars, const ForwardOptions& options,
                      ParamSet* bn_sink) const;

    NetworkSpec spec_;
    ParamSet params_;
};

struct BuildOptions {
    /// Draw biases and normalization affine parameters randomly as well;
    /// used by equivalence trials so that they are not trivially zero.
    bool randomize_all = false;
};

/// Seeded init: weights uniform in +-1/sqrt(fan_in), biases 0, gamma 1, beta 0.
Model build(const NetworkSpec& spec, std::uint64_t seed, const BuildOptions& options = {});

/// One residual block on [B x d] with A1, A2 weights [d x d].
Var residual_block_forward(const Var& x, ResidualVariant variant, const Var& a1, const Var& a2,
                           const std::optional<Var>& b1, const std::optional<Var>& b2, const Activation& rho,
                           double eps);

/// Multilayer perceptron input_dim -> hidden... -> classifier.
NetworkSpec mlp_spec(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t num_classes,
                     NormMode mode = NormMode::none, BiasPolicy bias = BiasPolicy::first_layer_only);
/// Conv(5,64) relu norm pool, Conv(5,64) relu norm pool, Dense(384) relu norm,
/// on 3 x 32 x 32 inputs.
NetworkSpec cnn_spec(std::size_t num_classes = 10, NormMode mode = NormMode::none,
                     BiasPolicy bias = BiasPolicy::first_layer_only);
/// Dense stem to `width` followed by `blocks` residual blocks.
NetworkSpec resmlp_spec(std::size_t input_dim, std::size_t width, std::size_t blocks, ResidualVariant variant,
                        std::size_t num_classes, NormMode mode = NormMode::none,
                        BiasPolicy bias = BiasPolicy::first_layer_only);

}  // namespace fednorm
