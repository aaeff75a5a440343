#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mdnik/errors.hpp"
#include "mdnik/mdn.hpp"

namespace mdnik {

using nlohmann::json;

namespace {

constexpr const char* kFormatName = "mdn-ik model";

json layer_json(const std::string& name, const DenseLayer& l) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    return {{"name", name},
            {"rows", l.weight.rows()},
            {"cols", l.weight.cols()},
            {"weight", w},
            {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}};
}

std::vector<double> number_array(const json& j, std::size_t expected, const std::string& what) {
    if (!j.is_array() || j.size() != expected) throw ParseError("corrupt model file: bad " + what);
    std::vector<double> out;
    out.reserve(expected);
    for (const auto& v : j) {
        if (!v.is_number()) throw ParseError("corrupt model file: non-numeric " + what);
        out.push_back(v.get<double>());
    }
    return out;
}

DenseLayer layer_from_json(const json& j, const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (j.at("name").get<std::string>() != name || j.at("rows").get<Eigen::Index>() != rows ||
        j.at("cols").get<Eigen::Index>() != cols)
        throw ParseError("corrupt model file: layer '" + name + "' has unexpected shape");
    DenseLayer l{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    const auto w = number_array(j.at("weight"), static_cast<std::size_t>(rows * cols), name + " weight");
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) l.weight(r, c) = w[static_cast<std::size_t>(r * cols + c)];
    const auto b = number_array(j.at("bias"), static_cast<std::size_t>(rows), name + " bias");
    for (Eigen::Index r = 0; r < rows; ++r) l.bias[r] = b[static_cast<std::size_t>(r)];
    return l;
}

json scaler_json(const Scaler& s) {
    return {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
            {"std", std::vector<double>(s.std.data(), s.std.data() + s.std.size())}};
}

Scaler scaler_from_json(const json& j, int dim, const std::string& what) {
    Scaler s;
    s.mean = Eigen::Map<const Eigen::VectorXd>(number_array(j.at("mean"), static_cast<std::size_t>(dim), what).data(), dim);
    s.std = Eigen::Map<const Eigen::VectorXd>(number_array(j.at("std"), static_cast<std::size_t>(dim), what).data(), dim);
    for (Eigen::Index i = 0; i < dim; ++i)
        if (!(s.std[i] > 0.0)) throw ParseError("corrupt model file: non-positive " + what + " std");
    return s;
}

}  // namespace

std::string model_to_json(const MdnModel& model) {
    const MdnConfig& c = model.config;
    json layers = json::array();
    for (std::size_t i = 0; i < model.params.trunk.size(); ++i)
        layers.push_back(layer_json("trunk" + std::to_string(i), model.params.trunk[i]));
    layers.push_back(layer_json("logits", model.params.logits));
    layers.push_back(layer_json("means", model.params.means));
    layers.push_back(layer_json("deviations", model.params.deviations));
    json doc = {{"format", kFormatName},
                {"version", kModelFormatVersion},
                {"chain", model.chain_fingerprint},
                {"config",
                 {{"input_dim", c.input_dim},
                  {"hidden_layers", c.hidden_layers},
                  {"hidden_width", c.hidden_width},
                  {"activation", "silu"},
                  {"components", c.components},
                  {"output_dim", c.output_dim},
                  {"sigma_floor", kSigmaFloor},
                  {"seed", c.seed}}},
                {"input_scaler", scaler_json(model.input_scaler)},
                {"output_scaler", scaler_json(model.output_scaler)},
                {"layers", layers}};
    return doc.dump(1) + "\n";
}

MdnModel model_from_json(const std::string& text, std::optional<std::size_t> expected_dof) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("corrupt model file: ") + e.what());
    }
    try {
        if (!doc.is_object() || doc.value("format", "") != kFormatName)
            throw ParseError("corrupt model file: not an mdn-ik model");
        const int version = doc.at("version").get<int>();
        if (version != kModelFormatVersion)
            throw ValidationError("model format version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kModelFormatVersion) + ")");
        MdnModel m;
        const json& cfg = doc.at("config");
        m.config.input_dim = cfg.at("input_dim").get<int>();
        m.config.hidden_layers = cfg.at("hidden_layers").get<int>();
        m.config.hidden_width = cfg.at("hidden_width").get<int>();
        m.config.components = cfg.at("components").get<int>();
        m.config.output_dim = cfg.at("output_dim").get<int>();
        m.config.seed = cfg.at("seed").get<std::uint64_t>();
        if (cfg.at("activation").get<std::string>() != "silu")
            throw ValidationError("unsupported activation '" + cfg.at("activation").get<std::string>() + "'");
        if (cfg.at("sigma_floor").get<double>() != kSigmaFloor) throw ValidationError("model uses a different sigma floor");
        m.config.validate();
        if (expected_dof && static_cast<std::size_t>(m.config.output_dim) != *expected_dof)
            throw DimensionError("model predicts " + std::to_string(m.config.output_dim) +
                                 " joints but the chain has dof " + std::to_string(*expected_dof));
        m.chain_fingerprint = doc.value("chain", "");
        m.input_scaler = scaler_from_json(doc.at("input_scaler"), m.config.input_dim, "input scaler");
        m.output_scaler = scaler_from_json(doc.at("output_scaler"), m.config.output_dim, "output scaler");

        const json& layers = doc.at("layers");
        const auto n_layers = static_cast<std::size_t>(m.config.hidden_layers) + 3;
        if (!layers.is_array() || layers.size() != n_layers) throw ParseError("corrupt model file: wrong layer count");
        Eigen::Index in = m.config.input_dim;
        const Eigen::Index width = m.config.hidden_width;
        for (int l = 0; l < m.config.hidden_layers; ++l) {
            m.params.trunk.push_back(layer_from_json(layers[static_cast<std::size_t>(l)], "trunk" + std::to_string(l), width, in));
            in = width;
        }
        const Eigen::Index k = m.config.components;
        const Eigen::Index kd = k * m.config.output_dim;
        const auto base = static_cast<std::size_t>(m.config.hidden_layers);
        m.params.logits = layer_from_json(layers[base], "logits", k, in);
        m.params.means = layer_from_json(layers[base + 1], "means", kd, in);
        m.params.deviations = layer_from_json(layers[base + 2], "deviations", kd, in);
        return m;
    } catch (const json::exception& e) {
        throw ParseError(std::string("corrupt model file: ") + e.what());
    }
}

void save_model(const std::string& path, const MdnModel& model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write model file '" + path + "'");
    out << model_to_json(model);
    if (!out) throw Error("write failed for '" + path + "'");
}

MdnModel load_model(const std::string& path, std::optional<std::size_t> expected_dof) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open model file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return model_from_json(ss.str(), expected_dof);
}

}  // namespace mdnik
