#include "sketchdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace sketchdiff {

using Kind = CheckpointError::Kind;
using nlohmann::json;

std::string CheckpointError::kind_name(Kind kind) {
    switch (kind) {
        case Kind::io: return "io error";
        case Kind::truncated: return "truncated";
        case Kind::version_mismatch: return "version mismatch";
        case Kind::shape_mismatch: return "shape mismatch";
        case Kind::malformed: return "malformed";
    }
    return "checkpoint error";
}

json ModelSpec::to_json() const {
    json j = network.to_json();
    j["diffusion"] = {{"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
    j["image_size"] = {height, width};
    return j;
}

ModelSpec ModelSpec::from_json(const json& j) {
    ModelSpec s;
    s.network = NetworkConfig::from_json(j);
    if (j.contains("diffusion")) {
        const auto& d = j["diffusion"];
        s.T = d.value("T", s.T);
        s.beta_start = d.value("beta_start", s.beta_start);
        s.beta_end = d.value("beta_end", s.beta_end);
    }
    if (j.contains("image_size")) {
        s.height = j["image_size"].at(0).get<int>();
        s.width = j["image_size"].at(1).get<int>();
    }
    s.network.check_input_extent(s.height, s.width);
    return s;
}

namespace {

void append_f32(std::vector<std::uint8_t>& out, std::span<const float> values) {
    const std::size_t start = out.size();
    out.resize(start + values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) out[start + i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
}

float read_f32(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return std::bit_cast<float>(bits);
}

json tensor_map(const ParameterSet& params, std::vector<std::uint8_t>& payload) {
    json m = json::object();
    for (const auto& e : params.layout().entries()) {
        const std::size_t offset = payload.size();
        append_f32(payload, params.view(e.name));
        m[e.name] = {{"dtype", "f32"}, {"shape", e.shape}, {"offset", offset}, {"length", e.length * 4}};
    }
    return m;
}

ParameterSet read_tensors(const json& map, const std::shared_ptr<const ParamLayout>& layout,
                          std::span<const std::uint8_t> payload, const std::string& section) {
    if (!map.is_object()) throw CheckpointError(Kind::malformed, "section " + section + " is not an object");
    ParameterSet params(layout);
    const std::string where = section.empty() ? "" : " in section " + section;
    for (const auto& e : layout->entries()) {
        if (!map.contains(e.name)) {
            throw CheckpointError(Kind::shape_mismatch, "parameter " + e.name + " missing" + where);
        }
        const json& t = map[e.name];
        std::vector<int> shape;
        std::size_t offset = 0, length = 0;
        try {
            if (t.at("dtype").get<std::string>() != "f32") {
                throw CheckpointError(Kind::malformed, "parameter " + e.name + " has unsupported dtype");
            }
            shape = t.at("shape").get<std::vector<int>>();
            offset = t.at("offset").get<std::size_t>();
            length = t.at("length").get<std::size_t>();
        } catch (const json::exception& ex) {
            throw CheckpointError(Kind::malformed, "parameter " + e.name + ": " + ex.what());
        }
        if (shape != e.shape) {
            std::string got, want;
            for (int d : shape) got += std::to_string(d) + ",";
            for (int d : e.shape) want += std::to_string(d) + ",";
            throw CheckpointError(Kind::shape_mismatch, "parameter " + e.name + where + " has shape [" + got +
                                                            "] but config expects [" + want + "]");
        }
        if (length != e.length * 4) {
            throw CheckpointError(Kind::malformed, "parameter " + e.name + " length disagrees with shape");
        }
        if (offset + length > payload.size()) {
            throw CheckpointError(Kind::truncated, "payload ends before parameter " + e.name + where);
        }
        auto dst = params.view(e.name);
        for (std::size_t i = 0; i < e.length; ++i) dst[i] = read_f32(payload.data() + offset + i * 4);
    }
    for (const auto& [name, _] : map.items()) {
        if (!layout->find(name)) {
            throw CheckpointError(Kind::shape_mismatch, "unexpected parameter " + name + where);
        }
    }
    return params;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const CheckpointContents& c) {
    std::vector<std::uint8_t> payload;
    json header = tensor_map(c.params, payload);
    header["format_version"] = kCheckpointFormatVersion;
    header["config"] = c.spec.to_json();
    if (c.ema) header["ema"] = tensor_map(*c.ema, payload);
    if (c.adam_m && c.adam_v) {
        header["opt"] = {{"m", tensor_map(*c.adam_m, payload)}, {"v", tensor_map(*c.adam_v, payload)}};
    }
    if (!c.train_meta.is_null()) header["train_meta"] = c.train_meta;

    const std::string text = header.dump();
    std::vector<std::uint8_t> file(8);
    const auto hlen = static_cast<std::uint64_t>(text.size());
    for (int b = 0; b < 8; ++b) file[b] = static_cast<std::uint8_t>(hlen >> (8 * b));
    file.insert(file.end(), text.begin(), text.end());
    file.insert(file.end(), payload.begin(), payload.end());

    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError(Kind::io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(file.data()), static_cast<std::streamsize>(file.size()));
        if (!out) throw CheckpointError(Kind::io, "short write to " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError(Kind::io, "cannot rename to " + path.string() + ": " + ec.message());
}

CheckpointContents read_checkpoint(const std::filesystem::path& path, const NetworkConfig* expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(Kind::io, "cannot open " + path.string());
    const std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < 8) throw CheckpointError(Kind::truncated, "file shorter than the header length field");
    std::uint64_t hlen = 0;
    for (int b = 0; b < 8; ++b) hlen |= static_cast<std::uint64_t>(file[b]) << (8 * b);
    if (hlen > file.size() - 8) throw CheckpointError(Kind::truncated, "file ends inside the header");

    json header;
    try {
        header = json::parse(file.begin() + 8, file.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const json::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("format_version")) {
        throw CheckpointError(Kind::malformed, "header lacks format_version");
    }
    if (!header["format_version"].is_number_integer() ||
        header["format_version"].get<int>() != kCheckpointFormatVersion) {
        throw CheckpointError(Kind::version_mismatch, "format_version " + header["format_version"].dump() +
                                                          ", expected " + std::to_string(kCheckpointFormatVersion));
    }
    if (!header.contains("config")) throw CheckpointError(Kind::malformed, "header lacks config");

    CheckpointContents c;
    try {
        c.spec = ModelSpec::from_json(header["config"]);
    } catch (const std::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("config: ") + e.what());
    }
    const UNet net(expected ? *expected : c.spec.network);
    const auto layout = net.layout();
    const std::span<const std::uint8_t> payload(file.data() + 8 + hlen, file.size() - 8 - hlen);

    json params_map = json::object();
    for (const auto& [key, value] : header.items()) {
        if (key != "format_version" && key != "config" && key != "ema" && key != "opt" && key != "train_meta") {
            params_map[key] = value;
        }
    }
    c.params = read_tensors(params_map, layout, payload, "");
    if (header.contains("ema")) c.ema = read_tensors(header["ema"], layout, payload, "ema");
    if (header.contains("opt")) {
        const auto& opt = header["opt"];
        if (!opt.is_object() || !opt.contains("m") || !opt.contains("v")) {
            throw CheckpointError(Kind::malformed, "opt section needs m and v");
        }
        c.adam_m = read_tensors(opt["m"], layout, payload, "opt.m");
        c.adam_v = read_tensors(opt["v"], layout, payload, "opt.v");
    }
    if (header.contains("train_meta")) c.train_meta = header["train_meta"];
    if (expected) c.spec.network = *expected;
    return c;
}

}  // namespace sketchdiff
