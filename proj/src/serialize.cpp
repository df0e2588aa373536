#include "fednorm/serialize.hpp"

#include <fstream>
#include <sstream>

#include "fednorm/errors.hpp"

namespace fednorm {

namespace {

constexpr const char* kCheckpointFormat = "fednorm-checkpoint";
constexpr int kCheckpointVersion = 1;

Json layer_to_json(const LayerSpec& layer) {
    return std::visit(
        [](const auto& l) -> Json {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, DenseLayer>) return {{"type", "dense"}, {"units", l.units}};
            else if constexpr (std::is_same_v<T, ConvLayer>)
                return {{"type", "conv"}, {"channels", l.channels}, {"kernel", l.kernel}, {"stride", l.stride}};
            else if constexpr (std::is_same_v<T, PoolLayer>)
                return {{"type", "pool"}, {"window", l.window}, {"stride", l.stride}};
            else if constexpr (std::is_same_v<T, FlattenLayer>) return {{"type", "flatten"}};
            else return {{"type", "residual"}, {"variant", to_string(l.variant)}};
        },
        layer);
}

LayerSpec layer_from_json(const Json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "dense") return DenseLayer{j.at("units").get<std::size_t>()};
    if (type == "conv")
        return ConvLayer{j.at("channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
                         j.value("stride", std::size_t{1})};
    if (type == "pool") return PoolLayer{j.value("window", std::size_t{2}), j.value("stride", std::size_t{2})};
    if (type == "flatten") return FlattenLayer{};
    if (type == "residual") return ResidualLayer{parse_residual_variant(j.value("variant", std::string("plain")))};
    throw ConfigError("unknown layer type '" + type + "'");
}

template <class F>
auto rethrow_as(const char* what, F&& f) {
    try {
        return f();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string(what) + ": " + e.what());
    }
}

}  // namespace

Json to_json(const NetworkSpec& spec) {
    Json layers = Json::array();
    for (const auto& l : spec.layers) layers.push_back(layer_to_json(l));
    return {
        {"input_shape", spec.input_shape},
        {"layers", layers},
        {"activation", {{"pos_slope", spec.activation.pos_slope}, {"neg_slope", spec.activation.neg_slope}}},
        {"norm_mode", to_string(spec.norm_mode)},
        {"gn_groups", spec.gn_groups},
        {"bias_policy", to_string(spec.bias_policy)},
        {"num_classes", spec.num_classes},
        {"bn_momentum", spec.bn_momentum},
        {"relax_bias_assumption", spec.relax_bias_assumption},
    };
}

NetworkSpec spec_from_json(const Json& j) {
    return rethrow_as("network spec", [&] {
        NetworkSpec s;
        s.input_shape = j.at("input_shape").get<Shape>();
        for (const auto& l : j.at("layers")) s.layers.push_back(layer_from_json(l));
        if (j.contains("activation")) {
            s.activation.pos_slope = j["activation"].value("pos_slope", 1.0);
            s.activation.neg_slope = j["activation"].value("neg_slope", 0.0);
        }
        s.norm_mode = parse_norm_mode(j.value("norm_mode", std::string("none")));
        s.gn_groups = j.value("gn_groups", std::size_t{2});
        s.bias_policy = parse_bias_policy(j.value("bias_policy", std::string("first_layer_only")));
        s.num_classes = j.value("num_classes", std::size_t{10});
        s.bn_momentum = j.value("bn_momentum", 0.1);
        s.relax_bias_assumption = j.value("relax_bias_assumption", false);
        return s;
    });
}

Json to_json(const ParamSet& params) {
    Json arr = Json::array();
    for (const auto& e : params.entries)
        arr.push_back({{"name", e.name}, {"kind", to_string(e.kind)}, {"shape", e.value.shape()},
                       {"values", e.value.values()}});
    return arr;
}

ParamSet params_from_json(const Json& j) {
    return rethrow_as("parameters", [&] {
        ParamSet ps;
        for (const auto& e : j)
            ps.entries.push_back({e.at("name").get<std::string>(), parse_param_kind(e.at("kind").get<std::string>()),
                                  Tensor(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>())});
        return ps;
    });
}

std::string checkpoint_string(const Model& model) {
    Json j = {{"format", kCheckpointFormat},
              {"version", kCheckpointVersion},
              {"spec", to_json(model.spec())},
              {"params", to_json(model.params())}};
    return j.dump() + "\n";
}

Model model_from_checkpoint_string(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw FormatError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
    if (!j.is_object() || j.value("format", std::string()) != kCheckpointFormat)
        throw FormatError("not a fednorm checkpoint");
    if (j.value("version", 0) != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + j.value("version", Json()).dump());
    try {
        return Model(spec_from_json(j.at("spec")), params_from_json(j.at("params")));
    } catch (const Json::exception& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ShapeError& e) {
        throw FormatError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_checkpoint(const std::string& path, const Model& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
    out << checkpoint_string(model);
    if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return model_from_checkpoint_string(buf.str());
}

}  // namespace fednorm
