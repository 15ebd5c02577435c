#include "osr/serialize.hpp"

#include <charconv>
#include <fstream>
#include <map>

namespace osr::serialize {

json spec_to_json(const nn::MlpSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers) {
        layers.push_back({{"in", l.in},
                          {"out", l.out},
                          {"activation", nn::activation_name(l.activation)},
                          {"batchnorm", l.batchnorm},
                          {"dropout", l.dropout}});
    }
    return {{"layers", layers}};
}

nn::MlpSpec spec_from_json(const json& j) {
    nn::MlpSpec spec;
    for (const auto& l : j.at("layers")) {
        nn::LayerSpec ls;
        ls.in = l.at("in").get<int>();
        ls.out = l.at("out").get<int>();
        ls.activation = nn::activation_from_name(l.at("activation").get<std::string>());
        ls.batchnorm = l.at("batchnorm").get<bool>();
        ls.dropout = l.at("dropout").get<double>();
        spec.layers.push_back(ls);
    }
    spec.validate();
    return spec;
}

namespace {

json named_array(const std::string& name, const std::vector<int>& shape, const Vec& data) {
    return {{"name", name}, {"shape", shape}, {"data", data}};
}

}  // namespace

json params_to_json(const nn::MlpSpec& spec, const nn::MlpParams& params) {
    params.check_consistent(spec);
    json arrays = json::array();
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& l = params.layers[i];
        const std::string prefix = "layer" + std::to_string(i) + ".";
        arrays.push_back(named_array(prefix + "weight", {l.weight.rows, l.weight.cols}, l.weight.data));
        arrays.push_back(named_array(prefix + "bias", {static_cast<int>(l.bias.size())}, l.bias));
        if (l.bn) {
            const int w = static_cast<int>(l.bn->gamma.size());
            arrays.push_back(named_array(prefix + "bn_gamma", {w}, l.bn->gamma));
            arrays.push_back(named_array(prefix + "bn_beta", {w}, l.bn->beta));
            arrays.push_back(named_array(prefix + "bn_running_mean", {w}, l.bn->running_mean));
            arrays.push_back(named_array(prefix + "bn_running_var", {w}, l.bn->running_var));
        }
    }
    return {{"spec", spec_to_json(spec)}, {"arrays", arrays}};
}

nn::MlpParams params_from_json(const nn::MlpSpec& spec, const json& j) {
    std::map<std::string, Vec> by_name;
    for (const auto& a : j.at("arrays"))
        by_name[a.at("name").get<std::string>()] = a.at("data").get<Vec>();

    auto take = [&](const std::string& name) -> Vec {
        auto it = by_name.find(name);
        require(it != by_name.end(), "params_from_json: missing array " + name);
        return std::move(it->second);
    };

    nn::MlpParams params;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto& ls = spec.layers[i];
        const std::string prefix = "layer" + std::to_string(i) + ".";
        nn::LayerParams lp;
        lp.weight = Matrix(ls.in, ls.out);
        lp.weight.data = take(prefix + "weight");
        require(static_cast<int>(lp.weight.data.size()) == ls.in * ls.out,
                "params_from_json: weight size mismatch at layer " + std::to_string(i));
        lp.bias = take(prefix + "bias");
        if (ls.batchnorm) {
            nn::BatchNormParams bn;
            bn.gamma = take(prefix + "bn_gamma");
            bn.beta = take(prefix + "bn_beta");
            bn.running_mean = take(prefix + "bn_running_mean");
            bn.running_var = take(prefix + "bn_running_var");
            lp.bn = std::move(bn);
        }
        params.layers.push_back(std::move(lp));
    }
    params.check_consistent(spec);
    return params;
}

json matrix_to_json(const Matrix& m) {
    return {{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

Matrix matrix_from_json(const json& j) {
    Matrix m(j.at("rows").get<int>(), j.at("cols").get<int>());
    m.data = j.at("data").get<Vec>();
    require(static_cast<int>(m.data.size()) == m.rows * m.cols, "matrix_from_json: size mismatch");
    return m;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw InvalidInput("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw NumericError("write failed: " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open: " + path.string());
    return json::parse(in);
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

}  // namespace osr::serialize
