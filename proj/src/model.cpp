#include "fednorm/model.hpp"

#include <cmath>

#include "fednorm/errors.hpp"
#include "fednorm/rng.hpp"

namespace fednorm {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

template <class Enum, std::size_t N>
Enum parse_enum(const std::string& s, const std::pair<Enum, const char*> (&table)[N], const char* what) {
    for (const auto& [e, name] : table)
        if (s == name) return e;
    throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

template <class Enum, std::size_t N>
std::string enum_name(Enum e, const std::pair<Enum, const char*> (&table)[N]) {
    for (const auto& [v, name] : table)
        if (v == e) return name;
    return "?";
}

const std::pair<NormMode, const char*> kNormModes[] = {
    {NormMode::none, "none"},
    {NormMode::fn_layerwise, "fn_layerwise"},
    {NormMode::fn_last, "fn_last"},
    {NormMode::ln_layerwise, "ln_layerwise"},
    {NormMode::ln_reduced, "ln_reduced"},
    {NormMode::ln_pre, "ln_pre"},
    {NormMode::ln_learnable, "ln_learnable"},
    {NormMode::gn, "gn"},
    {NormMode::bn, "bn"},
};

const std::pair<BiasPolicy, const char*> kBiasPolicies[] = {
    {BiasPolicy::all_biases, "all_biases"},
    {BiasPolicy::first_layer_only, "first_layer_only"},
    {BiasPolicy::none, "none"},
};

const std::pair<ResidualVariant, const char*> kResidualVariants[] = {
    {ResidualVariant::plain, "plain"},
    {ResidualVariant::ln_inner, "ln_inner"},
    {ResidualVariant::ln_shift, "ln_shift"},
    {ResidualVariant::fn_inner_mv, "fn_inner_mv"},
    {ResidualVariant::fn_inner_scale, "fn_inner_scale"},
};

const std::pair<ParamKind, const char*> kParamKinds[] = {
    {ParamKind::weight, "weight"},
    {ParamKind::bias, "bias"},
    {ParamKind::norm_scale, "norm_scale"},
    {ParamKind::norm_shift, "norm_shift"},
    {ParamKind::bn_running_mean, "bn_running_mean"},
    {ParamKind::bn_running_var, "bn_running_var"},
    {ParamKind::classifier, "classifier"},
};

bool is_site(const LayerSpec& l) {
    return std::holds_alternative<DenseLayer>(l) || std::holds_alternative<ConvLayer>(l) ||
           std::holds_alternative<ResidualLayer>(l);
}

std::string prefix(std::size_t layer) { return "l" + std::to_string(layer) + "."; }

// One layer with its per-sample input and output shapes.
struct LayerPlan {
    std::size_t index;
    LayerSpec layer;
    Shape in_shape;
    Shape out_shape;
    bool is_site = false;
    bool is_last_site = false;
    bool first_site = false;
};

std::vector<LayerPlan> plan_layers(const NetworkSpec& spec) {
    if (spec.input_shape.empty() || shape_size(spec.input_shape) == 0)
        throw ConfigError("network input_shape must be non-empty");
    std::vector<LayerPlan> plan;
    Shape cur = spec.input_shape;
    std::size_t last_site = spec.layers.size();
    for (std::size_t i = 0; i < spec.layers.size(); ++i)
        if (is_site(spec.layers[i])) last_site = i;
    if (last_site == spec.layers.size()) throw ConfigError("network needs at least one dense, conv or residual layer");
    bool seen_site = false;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerPlan p{i, spec.layers[i], cur, {}};
        std::visit(Overloaded{
                       [&](const DenseLayer& d) {
                           if (d.units == 0) throw ConfigError("dense layer " + std::to_string(i) + " has 0 units");
                           cur = Shape{d.units};
                       },
                       [&](const ConvLayer& c) {
                           if (cur.size() != 3)
                               throw ShapeError("conv layer " + std::to_string(i) + " needs a [c x h x w] input, got " +
                                                shape_string(cur));
                           if (c.channels == 0 || c.kernel == 0 || c.stride == 0 || c.kernel > cur[1] ||
                               c.kernel > cur[2])
                               throw ShapeError("conv layer " + std::to_string(i) + " does not fit input " +
                                                shape_string(cur));
                           cur = Shape{c.channels, (cur[1] - c.kernel) / c.stride + 1,
                                       (cur[2] - c.kernel) / c.stride + 1};
                       },
                       [&](const PoolLayer& pl) {
                           if (cur.size() != 3 || pl.window == 0 || pl.stride == 0 || pl.window > cur[1] ||
                               pl.window > cur[2])
                               throw ShapeError("pool layer " + std::to_string(i) + " does not fit input " +
                                                shape_string(cur));
                           cur = Shape{cur[0], (cur[1] - pl.window) / pl.stride + 1,
                                       (cur[2] - pl.window) / pl.stride + 1};
                       },
                       [&](const FlattenLayer&) { cur = Shape{shape_size(cur)}; },
                       [&](const ResidualLayer&) { cur = Shape{shape_size(cur)}; },
                   },
                   spec.layers[i]);
        p.out_shape = cur;
        p.is_site = is_site(spec.layers[i]);
        p.is_last_site = (i == last_site);
        p.first_site = p.is_site && !seen_site;
        seen_site = seen_site || p.is_site;
        plan.push_back(std::move(p));
    }
    return plan;
}

bool site_has_bias(const NetworkSpec& spec, const LayerPlan& p) {
    if (std::holds_alternative<ResidualLayer>(p.layer)) return spec.bias_policy == BiasPolicy::all_biases;
    switch (spec.bias_policy) {
        case BiasPolicy::all_biases: return true;
        case BiasPolicy::first_layer_only: return p.first_site;
        case BiasPolicy::none: return false;
    }
    return false;
}

std::size_t channels_of(const Shape& s) { return s.size() == 3 ? s[0] : shape_size(s); }

Shape batched(std::size_t b, const Shape& sample) {
    Shape s{b};
    s.insert(s.end(), sample.begin(), sample.end());
    return s;
}

}  // namespace

std::string to_string(NormMode m) { return enum_name(m, kNormModes); }
std::string to_string(BiasPolicy p) { return enum_name(p, kBiasPolicies); }
std::string to_string(ResidualVariant v) { return enum_name(v, kResidualVariants); }
std::string to_string(ParamKind k) { return enum_name(k, kParamKinds); }
NormMode parse_norm_mode(const std::string& s) { return parse_enum(s, kNormModes, "norm mode"); }
BiasPolicy parse_bias_policy(const std::string& s) { return parse_enum(s, kBiasPolicies, "bias policy"); }
ResidualVariant parse_residual_variant(const std::string& s) {
    return parse_enum(s, kResidualVariants, "residual variant");
}
ParamKind parse_param_kind(const std::string& s) { return parse_enum(s, kParamKinds, "parameter kind"); }

bool requires_bias_free_inner_layers(NormMode m) {
    return m == NormMode::fn_layerwise || m == NormMode::fn_last || m == NormMode::ln_layerwise ||
           m == NormMode::ln_reduced;
}

void validate(const NetworkSpec& spec) {
    if (spec.num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (spec.bn_momentum <= 0.0 || spec.bn_momentum > 1.0) throw ConfigError("bn_momentum must be in (0, 1]");
    if (requires_bias_free_inner_layers(spec.norm_mode) && spec.bias_policy == BiasPolicy::all_biases &&
        !spec.relax_bias_assumption)
        throw ConfigError("norm mode " + to_string(spec.norm_mode) +
                          " requires bias_policy first_layer_only or none");
    for (const auto& p : plan_layers(spec)) {
        if (!p.is_site) continue;
        if (std::holds_alternative<ResidualLayer>(p.layer) && spec.norm_mode == NormMode::ln_pre)
            throw ConfigError("ln_pre is not defined for residual blocks");
        if (spec.norm_mode == NormMode::gn) {
            const std::size_t ch = channels_of(p.out_shape);
            if (spec.gn_groups == 0 || ch % spec.gn_groups != 0)
                throw ConfigError("gn_groups " + std::to_string(spec.gn_groups) + " does not divide width " +
                                  std::to_string(ch) + " of layer " + std::to_string(p.index));
        }
    }
}

std::size_t feature_dim(const NetworkSpec& spec) { return shape_size(plan_layers(spec).back().out_shape); }

const ParamEntry* ParamSet::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

ParamEntry* ParamSet::find(const std::string& name) {
    for (auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

std::size_t ParamSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return i;
    throw ConfigError("no parameter named '" + name + "'");
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries)
        if (is_trainable(e.kind)) n += e.value.size();
    return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
    if (entries.size() != other.entries.size()) return false;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto &a = entries[i], &b = other.entries[i];
        if (a.name != b.name || a.kind != b.kind || a.value.shape() != b.value.shape()) return false;
    }
    return true;
}

ParamSet ParamSet::zeros_like() const {
    ParamSet z;
    for (const auto& e : entries) z.entries.push_back({e.name, e.kind, Tensor(e.value.shape(), 0.0)});
    return z;
}

Model::Model(NetworkSpec spec, ParamSet params) : spec_(std::move(spec)), params_(std::move(params)) {
    validate(spec_);
    const Model reference = build(spec_, 0);
    if (!params_.same_layout(reference.params()))
        throw ShapeError("parameter set does not match the network layout");
}

Model build(const NetworkSpec& spec, std::uint64_t seed, const BuildOptions& options) {
    validate(spec);
    Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
    ParamSet ps;
    auto uniform_tensor = [&](Shape shape, double bound) {
        Tensor t(std::move(shape));
        for (auto& v : t.values()) v = uniform(rng, -bound, bound);
        return t;
    };
    auto add = [&](std::string name, ParamKind kind, Tensor value) {
        ps.entries.push_back({std::move(name), kind, std::move(value)});
    };
    auto add_bias = [&](const std::string& name, std::size_t n, double bound) {
        add(name, ParamKind::bias, options.randomize_all ? uniform_tensor({n}, bound) : Tensor(Shape{n}, 0.0));
    };

    for (const auto& p : plan_layers(spec)) {
        if (!p.is_site) continue;
        const std::string pre = prefix(p.index);
        const bool bias = site_has_bias(spec, p);
        std::visit(Overloaded{
                       [&](const DenseLayer& d) {
                           const std::size_t fan_in = shape_size(p.in_shape);
                           const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
                           add(pre + "weight", ParamKind::weight, uniform_tensor({d.units, fan_in}, bound));
                           if (bias) add_bias(pre + "bias", d.units, bound);
                       },
                       [&](const ConvLayer& c) {
                           const std::size_t fan_in = p.in_shape[0] * c.kernel * c.kernel;
                           const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
                           add(pre + "weight", ParamKind::weight,
                               uniform_tensor({c.channels, p.in_shape[0], c.kernel, c.kernel}, bound));
                           if (bias) add_bias(pre + "bias", c.channels, bound);
                       },
                       [&](const ResidualLayer&) {
                           const std::size_t d = shape_size(p.in_shape);
                           const double bound = 1.0 / std::sqrt(static_cast<double>(d));
                           add(pre + "a1", ParamKind::weight, uniform_tensor({d, d}, bound));
                           add(pre + "a2", ParamKind::weight, uniform_tensor({d, d}, bound));
                           if (bias) {
                               add_bias(pre + "b1", d, bound);
                               add_bias(pre + "b2", d, bound);
                           }
                       },
                       [](const auto&) {},
                   },
                   p.layer);
        const std::size_t width = shape_size(p.out_shape);
        if (spec.norm_mode == NormMode::ln_learnable) {
            add(pre + "gamma", ParamKind::norm_scale,
                options.randomize_all ? uniform_tensor({width}, 1.0) : Tensor(Shape{width}, 1.0));
            if (options.randomize_all)
                for (auto& v : ps.entries.back().value.values()) v += 1.0;
            add(pre + "beta", ParamKind::norm_shift,
                options.randomize_all ? uniform_tensor({width}, 0.5) : Tensor(Shape{width}, 0.0));
        } else if (spec.norm_mode == NormMode::bn) {
            const std::size_t ch = channels_of(p.out_shape);
            add(pre + "running_mean", ParamKind::bn_running_mean, Tensor(Shape{ch}, 0.0));
            add(pre + "running_var", ParamKind::bn_running_var, Tensor(Shape{ch}, 1.0));
        }
    }
    const std::size_t d = feature_dim(spec);
    add("classifier.weight", ParamKind::classifier,
        uniform_tensor({spec.num_classes, d}, 1.0 / std::sqrt(static_cast<double>(d))));

    return Model(spec, std::move(ps), Model::Unchecked{});
}

Var residual_block_forward(const Var& x, ResidualVariant variant, const Var& a1, const Var& a2,
                           const std::optional<Var>& b1, const std::optional<Var>& b2, const Activation& rho,
                           double eps) {
    const std::size_t d = x.value().row_size();
    if (a1.value().shape() != Shape{d, d} || a2.value().shape() != Shape{d, d})
        throw ShapeError("residual block needs square [" + std::to_string(d) + " x " + std::to_string(d) +
                         "] transforms");
    Var h = activate(affine(x, a1, b1), rho);
    switch (variant) {
        case ResidualVariant::plain: break;
        case ResidualVariant::ln_inner:
        case ResidualVariant::ln_shift:
        case ResidualVariant::fn_inner_mv: h = mv_normalize(h, eps); break;
        case ResidualVariant::fn_inner_scale: h = scale_normalize(h, eps); break;
    }
    Var out = activate(add(x, affine(h, a2, b2)), rho);
    if (variant == ResidualVariant::ln_inner) return mv_normalize(out, eps);
    if (variant == ResidualVariant::ln_shift) return mean_shift(out);
    return out;
}

ForwardResult Model::forward(Tape& tape, const Tensor& inputs, const ForwardOptions& options) {
    return run(tape, inputs, {}, options, options.training ? &params_ : nullptr);
}

ForwardResult Model::forward(Tape& tape, const Tensor& inputs, std::span<const Var> param_vars,
                             const ForwardOptions& options) {
    if (param_vars.size() != params_.size())
        throw ShapeError("forward: expected " + std::to_string(params_.size()) + " parameter handles, got " +
                         std::to_string(param_vars.size()));
    return run(tape, inputs, param_vars, options, options.training ? &params_ : nullptr);
}

std::pair<Tensor, Tensor> Model::predict(const Tensor& inputs, double epsilon) const {
    Tape tape;
    ForwardOptions opt;
    opt.epsilon = epsilon;
    auto r = run(tape, inputs, {}, opt, nullptr);
    return {r.logits.value(), r.features.value()};
}

ForwardResult Model::run(Tape& tape, const Tensor& inputs, std::span<const Var> param_vars,
                         const ForwardOptions& options, ParamSet* bn_sink) const {
    const double eps = options.epsilon;
    Tensor x = inputs;
    if (x.shape() == spec_.input_shape) {
        x = x.reshaped(batched(1, spec_.input_shape));
    } else if (x.rank() != spec_.input_shape.size() + 1 ||
               !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), x.shape().begin() + 1)) {
        throw ShapeError("model expects inputs of shape [B x " + shape_string(spec_.input_shape) + "], got " +
                         shape_string(x.shape()));
    }
    const std::size_t batch = x.dim(0);

    ForwardResult result;
    result.params.reserve(params_.size());
    if (!param_vars.empty()) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (param_vars[i].value().shape() != params_[i].value.shape())
                throw ShapeError("forward: handle for '" + params_[i].name + "' has shape " +
                                 shape_string(param_vars[i].value().shape()));
            result.params.push_back(param_vars[i]);
        }
    } else {
        for (const auto& e : params_.entries)
            result.params.push_back(options.differentiable && is_trainable(e.kind) ? tape.parameter(e.value)
                                                                                    : tape.constant(e.value));
    }
    auto param = [&](const std::string& name) { return result.params[params_.index_of(name)]; };
    auto maybe_param = [&](const std::string& name) -> std::optional<Var> {
        if (!params_.find(name)) return std::nullopt;
        return param(name);
    };

    const Activation& rho = spec_.activation;
    const NormMode mode = spec_.norm_mode;
    Var h = tape.constant(std::move(x));
    for (const auto& p : plan_layers(spec_)) {
        const std::string pre = prefix(p.index);
        if (!p.is_site) {
            if (const auto* pl = std::get_if<PoolLayer>(&p.layer)) h = maxpool2d(h, pl->window, pl->stride);
            else h = flatten(h);
            continue;
        }
        if (const auto* r = std::get_if<ResidualLayer>(&p.layer)) {
            if (h.value().rank() != 2) h = flatten(h);
            h = residual_block_forward(h, r->variant, param(pre + "a1"), param(pre + "a2"), maybe_param(pre + "b1"),
                                       maybe_param(pre + "b2"), rho, eps);
        } else {
            Var z = std::holds_alternative<DenseLayer>(p.layer)
                        ? affine(h, param(pre + "weight"), maybe_param(pre + "bias"))
                        : conv2d(h, param(pre + "weight"), std::get<ConvLayer>(p.layer).stride,
                                 maybe_param(pre + "bias"));
            if (mode == NormMode::ln_pre) z = mv_normalize(z, eps);
            h = activate(z, rho);
        }
        switch (mode) {
            case NormMode::none:
            case NormMode::ln_pre: break;
            case NormMode::fn_layerwise: h = scale_normalize(h, eps); break;
            case NormMode::fn_last:
                if (p.is_last_site) h = scale_normalize(h, eps);
                break;
            case NormMode::ln_layerwise: h = mv_normalize(h, eps); break;
            case NormMode::ln_reduced: h = p.is_last_site ? mv_normalize(h, eps) : mean_shift(h); break;
            case NormMode::ln_learnable: h = mv_learnable(h, param(pre + "gamma"), param(pre + "beta"), eps); break;
            case NormMode::gn: h = group_normalize(h, spec_.gn_groups, eps); break;
            case NormMode::bn: {
                const std::size_t im = params_.index_of(pre + "running_mean");
                const std::size_t iv = params_.index_of(pre + "running_var");
                BatchNormState state{spec_.bn_momentum, result.params[im].value(), result.params[iv].value()};
                h = batch_normalize(h, state, eps, options.training);
                if (bn_sink) {
                    (*bn_sink)[im].value = std::move(state.running_mean);
                    (*bn_sink)[iv].value = std::move(state.running_var);
                }
                break;
            }
        }
    }
    if (h.value().rank() != 2) h = flatten(h);
    if (h.value().dim(0) != batch) throw ShapeError("internal: batch dimension lost");
    result.features = h;
    result.logits = affine(h, param("classifier.weight"));
    return result;
}

Model Model::with_norm_mode(NormMode mode) const {
    NetworkSpec spec = spec_;
    spec.norm_mode = mode;
    Model fresh = build(spec, 0);
    for (auto& e : fresh.params_.entries)
        if (const auto* src = params_.find(e.name); src && src->value.shape() == e.value.shape()) e.value = src->value;
    return fresh;
}

NetworkSpec mlp_spec(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t num_classes,
                     NormMode mode, BiasPolicy bias) {
    NetworkSpec s;
    s.input_shape = {input_dim};
    for (auto h : hidden) s.layers.push_back(DenseLayer{h});
    s.norm_mode = mode;
    s.bias_policy = bias;
    s.num_classes = num_classes;
    return s;
}

NetworkSpec cnn_spec(std::size_t num_classes, NormMode mode, BiasPolicy bias) {
    NetworkSpec s;
    s.input_shape = {3, 32, 32};
    s.layers = {ConvLayer{64, 5, 1}, PoolLayer{2, 2}, ConvLayer{64, 5, 1}, PoolLayer{2, 2}, FlattenLayer{},
                DenseLayer{384}};
    s.norm_mode = mode;
    s.bias_policy = bias;
    s.num_classes = num_classes;
    return s;
}

NetworkSpec resmlp_spec(std::size_t input_dim, std::size_t width, std::size_t blocks, ResidualVariant variant,
                        std::size_t num_classes, NormMode mode, BiasPolicy bias) {
    NetworkSpec s;
    s.input_shape = {input_dim};
    s.layers.push_back(DenseLayer{width});
    for (std::size_t i = 0; i < blocks; ++i) s.layers.push_back(ResidualLayer{variant});
    s.norm_mode = mode;
    s.bias_policy = bias;
    s.num_classes = num_classes;
    return s;
}

}  // namespace fednorm
