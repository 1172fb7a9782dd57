#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lplab/config.hpp"
#include "lplab/errors.hpp"
#include "lplab/lora.hpp"
#include "lplab/model.hpp"

namespace lplab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Container layout:
//   bytes 0..5   magic "LPLAB1"
//   u64          header byte count
//   header       text, `key = value` lines describing the model skeleton
//   blobs        per layer, in order: weight, [bias], [A], [B], [mask];
//                each blob is u64 byte count + payload. Float arrays are
//                row-major little-endian f64; masks are packed bits,
//                row-major, LSB first.
inline constexpr char kCheckpointMagic[6] = {'L', 'P', 'L', 'A', 'B', '1'};
constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::vector<std::uint8_t> pack_bits(const std::vector<std::uint8_t>& bits) {
    std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    }
    return out;
}

inline std::vector<std::uint8_t> unpack_bits(const std::vector<std::uint8_t>& bytes,
                                             std::size_t count) {
    std::vector<std::uint8_t> out(count, 0);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = (bytes[i / 8] >> (i % 8)) & 1u;
    }
    return out;
}

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw UsageError("cannot open '" + path + "' for writing");
    }

    void raw(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        offset_ += n;
    }

    void u64(std::uint64_t v) { raw(&v, sizeof(v)); }

    void blob(const void* p, std::size_t n) {
        u64(n);
        raw(p, n);
    }

    void doubles(const std::vector<double>& v) { blob(v.data(), v.size() * sizeof(double)); }

private:
    std::ofstream out_;
    std::size_t offset_ = 0;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw FormatError("cannot open checkpoint '" + path + "'");
    }

    std::size_t offset() const { return offset_; }

    void raw(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) {
            throw FormatError("'" + path_ + "': truncated at offset " +
                              std::to_string(offset_ + static_cast<std::size_t>(in_.gcount())));
        }
        offset_ += n;
    }

    std::uint64_t u64() {
        std::uint64_t v = 0;
        raw(&v, sizeof(v));
        return v;
    }

    std::vector<std::uint8_t> blob(std::uint64_t expected_len, const char* what) {
        const std::uint64_t n = u64();
        if (n != expected_len) {
            throw FormatError("'" + path_ + "': " + what + " blob of " + std::to_string(n) +
                              " bytes at offset " + std::to_string(offset_ - sizeof(n)) +
                              ", expected " + std::to_string(expected_len));
        }
        std::vector<std::uint8_t> out(n);
        if (n > 0) raw(out.data(), n);
        return out;
    }

    std::vector<double> doubles(std::size_t count, const char* what) {
        auto bytes = blob(count * sizeof(double), what);
        std::vector<double> out(count);
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }

private:
    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

inline std::string spec_header(const Model& model) {
    const ModelSpec& s = model.spec();
    std::ostringstream h;
    h << "format_version = " << kCheckpointVersion << "\n";
    h << "kind = " << to_string(s.kind) << "\n";
    h << "input_dim = " << s.input_dim << "\n";
    h << "classes = " << s.classes << "\n";
    h << "activation = " << to_string(s.activation) << "\n";
    h << "seed = " << s.seed << "\n";
    std::string hidden;
    for (std::size_t i = 0; i < s.hidden.size(); ++i) {
        if (i) hidden += ",";
        hidden += std::to_string(s.hidden[i]);
    }
    h << "hidden = " << hidden << "\n";
    h << "tokens = " << s.tokens << "\n";
    h << "ffn_dim = " << s.ffn_dim << "\n";
    h << "layers = " << model.layers().size() << "\n";
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
        const auto& l = model.layers()[i];
        h << "layer." << i << ".rows = " << l.weight->rows() << "\n";
        h << "layer." << i << ".cols = " << l.weight->cols() << "\n";
        h << "layer." << i << ".bias = " << (l.bias ? 1 : 0) << "\n";
        h << "layer." << i << ".lora = " << (l.has_lora() ? 1 : 0) << "\n";
        h << "layer." << i << ".mask = " << (l.has_mask() ? 1 : 0) << "\n";
        if (l.has_lora()) {
            h << "layer." << i << ".mode = " << to_string(l.adapter().mode) << "\n";
            h << "layer." << i << ".rank = " << l.adapter().rank << "\n";
        }
    }
    return h.str();
}

} // namespace detail

inline void checkpoint_save(const std::string& path, const Model& model) {
    detail::Writer w(path);
    w.raw(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::string header = detail::spec_header(model);
    w.blob(header.data(), header.size());
    for (const auto& l : model.layers()) {
        w.doubles(l.weight->data);
        if (l.bias) w.doubles(l.bias->data);
        if (l.has_lora()) {
            w.doubles(l.adapter().a->data);
            w.doubles(l.adapter().b->data);
        }
        if (l.has_mask()) {
            auto packed = detail::pack_bits(l.mask());
            w.blob(packed.data(), packed.size());
        }
    }
}

inline Model checkpoint_load(const std::string& path) {
    detail::Reader r(path);
    char magic[6];
    r.raw(magic, sizeof(magic));
    if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw FormatError("'" + path + "': bad magic at offset 0, expected LPLAB1 (got '" +
                          std::string(magic, magic + 6) + "')");
    }
    const std::size_t header_offset = r.offset() + sizeof(std::uint64_t);
    const std::uint64_t header_len = r.u64();
    std::string header(header_len, '\0');
    if (header_len > 0) r.raw(header.data(), header_len);

    Config h = Config::parse_string(header, path + "#header");
    const long version = h.get_long("format_version");
    if (version != kCheckpointVersion) {
        throw FormatError("'" + path + "': unsupported format_version " +
                          std::to_string(version) + " in header at offset " +
                          std::to_string(header_offset) + ", this build reads version " +
                          std::to_string(kCheckpointVersion));
    }

    ModelSpec spec;
    spec.kind = model_kind_from(h.get_str("kind"));
    spec.input_dim = static_cast<std::size_t>(h.get_long("input_dim"));
    spec.classes = static_cast<std::size_t>(h.get_long("classes"));
    spec.activation = activation_from(h.get_str("activation"));
    spec.seed = h.get_u64("seed", 0);
    spec.tokens = static_cast<std::size_t>(h.get_long("tokens"));
    spec.ffn_dim = static_cast<std::size_t>(h.get_long("ffn_dim"));
    if (h.has("hidden") && !h.get_str("hidden").empty()) {
        for (long v : h.get_long_list("hidden"))
            spec.hidden.push_back(static_cast<std::size_t>(v));
    }

    Model model = Model::build(spec);
    const std::size_t n_layers = static_cast<std::size_t>(h.get_long("layers"));
    if (n_layers != model.layers().size()) {
        throw FormatError("'" + path + "': header lists " + std::to_string(n_layers) +
                          " layers, skeleton has " + std::to_string(model.layers().size()));
    }

    for (std::size_t i = 0; i < n_layers; ++i) {
        auto& l = model.layers()[i];
        const std::string pre = "layer." + std::to_string(i) + ".";
        const std::size_t rows = static_cast<std::size_t>(h.get_long(pre + "rows"));
        const std::size_t cols = static_cast<std::size_t>(h.get_long(pre + "cols"));
        if (rows != l.weight->rows() || cols != l.weight->cols()) {
            throw FormatError("'" + path + "': layer " + std::to_string(i) + " is " +
                              Shape{rows, cols}.str() + ", skeleton expects " +
                              l.weight->shape.str());
        }
        const bool has_bias = h.get_long(pre + "bias") != 0;
        const bool has_lora = h.get_long(pre + "lora") != 0;
        const bool has_mask = h.get_long(pre + "mask") != 0;
        if (has_bias != static_cast<bool>(l.bias)) {
            throw FormatError("'" + path + "': layer " + std::to_string(i) +
                              " bias flag mismatch");
        }

        l.weight->data = r.doubles(l.weight->size(), "weight");
        if (l.bias) l.bias->data = r.doubles(l.bias->size(), "bias");
        if (has_lora) {
            Adapter ad;
            ad.mode = adapter_mode_from(h.get_str(pre + "mode"));
            ad.rank = static_cast<int>(h.get_long(pre + "rank"));
            const std::size_t a_cols = (ad.mode == AdapterMode::parallel) ? cols : rows;
            ad.a = tensor(static_cast<std::size_t>(ad.rank), a_cols, true);
            ad.a->data = r.doubles(ad.a->size(), "lora A");
            ad.b = tensor(rows, static_cast<std::size_t>(ad.rank), true);
            ad.b->data = r.doubles(ad.b->size(), "lora B");
            l.install_adapter(std::move(ad));
        }
        if (has_mask) {
            if (!has_lora) {
                throw FormatError("'" + path + "': layer " + std::to_string(i) +
                                  " carries a mask without an adapter");
            }
            const std::size_t n_bits = rows * cols;
            auto packed = r.blob((n_bits + 7) / 8, "mask");
            l.set_mask_unchecked(detail::unpack_bits(packed, n_bits));
        }
    }
    return model;
}

} // namespace lplab
