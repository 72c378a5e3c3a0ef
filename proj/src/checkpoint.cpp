#include "flexdit/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace flexdit {

namespace {

constexpr char kMagic[4] = {'F', 'X', 'C', 'K'};
enum Section : std::uint8_t { model_section = 0, ema_section = 1, adam_m_section = 2, adam_v_section = 3 };

const char* section_name(std::uint8_t s) {
    switch (s) {
        case model_section: return "model";
        case ema_section: return "ema";
        case adam_m_section: return "adam.m";
        case adam_v_section: return "adam.v";
    }
    return "?";
}

class Writer {
  public:
    std::vector<std::uint8_t> bytes;
    template <typename T>
    void put(T v) {
        using U = std::make_unsigned_t<T>;
        auto u = static_cast<U>(v);
        for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
    void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(const std::string& s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
};

class Reader {
  public:
    Reader(const std::vector<std::uint8_t>& b, std::string origin) : bytes_(b), origin_(std::move(origin)) {}
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw DataError("truncated checkpoint " + origin_ + ": " + what + " needs " + std::to_string(n) +
                            " bytes at offset " + std::to_string(pos_) + " but the file has " +
                            std::to_string(bytes_.size()) + " bytes");
        }
    }
    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::make_unsigned_t<T> u = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(u);
    }
    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    std::size_t pos() const { return pos_; }
    std::size_t size() const { return bytes_.size(); }
    const std::string& origin() const { return origin_; }

  private:
    const std::vector<std::uint8_t>& bytes_;
    std::string origin_;
    std::size_t pos_ = 0;
};

struct Entry {
    std::string name;
    std::uint8_t section = 0;
    bool frozen = false;
    const Mat* value = nullptr;
};

std::map<std::string, std::string> parse_lines(const std::string& text, const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError(origin + ": malformed header line '" + line + "'");
        if (!kv.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
            throw DataError(origin + ": duplicate header key '" + line.substr(0, eq) + "'");
        }
    }
    return kv;
}

const std::string& field(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("checkpoint header is missing '" + key + "'");
    return it->second;
}

template <typename T>
T number(const std::map<std::string, std::string>& kv, const std::string& key) {
    const auto& s = field(kv, key);
    T v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw DataError("checkpoint header field '" + key + "' is not a number: '" + s + "'");
    }
    return v;
}

std::string join(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

FlexMode flex_mode_from_string(const std::string& s) {
    if (s == "base") return FlexMode::base;
    if (s == "shared") return FlexMode::shared;
    if (s == "lora") return FlexMode::lora;
    throw DataError("unknown flex mode '" + s + "'");
}

ModelParams skeleton(const ModelConfig& cfg, FlexMode mode, int merged_for) {
    const auto base = init_model(cfg, 0);
    switch (mode) {
        case FlexMode::base: return base;
        case FlexMode::shared: return flexify_shared(base);
        case FlexMode::lora: {
            auto m = flexify_lora(base, cfg.lora_rank, 0);
            return merged_for ? merge_loras(m, merged_for) : m;
        }
    }
    throw DataError("unknown flex mode");
}

}  // namespace

std::string model_config_text(const ModelConfig& c) {
    std::ostringstream o;
    o << "depth=" << c.depth << "\nhidden=" << c.hidden << "\nheads=" << c.heads << "\nmlp_ratio=" << c.mlp_ratio
      << "\nchannels=" << c.image.c << "\nheight=" << c.image.h << "\nwidth=" << c.image.w
      << "\nlearned_variance=" << (c.learned_variance ? 1 : 0) << "\nconditioning=" << to_string(c.conditioning)
      << "\nnum_classes=" << c.num_classes << "\nvocab=" << c.vocab << "\nsteps=" << c.steps
      << "\np_powerful=" << c.p_powerful << "\np_weak=" << c.p_weak << "\npos_mode=" << to_string(c.pos_mode)
      << "\nlora_rank=" << c.lora_rank << "\nlora_scale=" << format_double(c.lora_scale)
      << "\nln_eps=" << format_double(c.ln_eps) << "\n";
    return o.str();
}

ModelConfig parse_model_config(const std::string& text) {
    const auto kv = parse_lines(text, "model config");
    ModelConfig c;
    c.depth = number<int>(kv, "depth");
    c.hidden = number<int>(kv, "hidden");
    c.heads = number<int>(kv, "heads");
    c.mlp_ratio = number<int>(kv, "mlp_ratio");
    c.image = {number<int>(kv, "channels"), number<int>(kv, "height"), number<int>(kv, "width")};
    c.learned_variance = number<int>(kv, "learned_variance") != 0;
    const auto& cond = field(kv, "conditioning");
    if (cond == to_string(Conditioning::class_label)) c.conditioning = Conditioning::class_label;
    else if (cond == to_string(Conditioning::cross_attention)) c.conditioning = Conditioning::cross_attention;
    else throw DataError("unknown conditioning '" + cond + "'");
    c.num_classes = number<int>(kv, "num_classes");
    c.vocab = number<int>(kv, "vocab");
    c.steps = number<int>(kv, "steps");
    c.p_powerful = number<int>(kv, "p_powerful");
    c.p_weak = number<int>(kv, "p_weak");
    const auto& pos = field(kv, "pos_mode");
    if (pos == to_string(PosMode::sincos)) c.pos_mode = PosMode::sincos;
    else if (pos == to_string(PosMode::learned)) c.pos_mode = PosMode::learned;
    else throw DataError("unknown positional mode '" + pos + "'");
    c.lora_rank = number<int>(kv, "lora_rank");
    c.lora_scale = number<double>(kv, "lora_scale");
    c.ln_eps = number<double>(kv, "ln_eps");
    return c;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    const auto& m = ck.model;
    const auto params = m.named_parameters();

    std::vector<Entry> entries;
    std::set<std::string> names;
    std::vector<std::string> trainable;
    for (const auto& np : params) {
        if (!names.insert(np.name).second) throw Error("duplicate tensor name '" + np.name + "'");
        entries.push_back({np.name, model_section, np.frozen, &np.var.value()});
        if (!np.frozen) trainable.push_back(np.name);
    }
    if (ck.state) {
        auto add = [&](const std::vector<Mat>& list, std::uint8_t section) {
            if (list.empty()) return;
            if (list.size() != trainable.size()) {
                throw Error(std::string("training state: ") + section_name(section) + " has " +
                            std::to_string(list.size()) + " tensors for " + std::to_string(trainable.size()) +
                            " trainable parameters");
            }
            for (std::size_t i = 0; i < list.size(); ++i) entries.push_back({trainable[i], section, false, &list[i]});
        };
        add(ck.state->ema, ema_section);
        add(ck.state->adam.m, adam_m_section);
        add(ck.state->adam.v, adam_v_section);
    }

    std::ostringstream h;
    h << model_config_text(m.cfg) << "mode=" << to_string(m.mode) << "\nmerged_for=" << m.merged_for
      << "\npatch_sizes=" << join(m.spec.supported) << "\nflatten=row-major\n";
    h << "has_state=" << (ck.state ? 1 : 0) << "\nseed=" << ck.seed << "\ntrain_mode=" << ck.train_mode << "\n";
    if (ck.state) {
        h << "step=" << ck.state->step << "\nadam_step=" << ck.state->adam.step << "\nflops=" << ck.state->flops << "\n";
    }
    const std::string header = h.str();

    Writer w;
    w.put_bytes(std::string(kMagic, 4));
    w.put(kCheckpointVersion);
    w.put(static_cast<std::uint32_t>(header.size()));
    w.put_bytes(header);
    w.put(static_cast<std::uint32_t>(entries.size()));
    std::uint64_t offset = 0;
    std::vector<std::uint8_t> payload;
    for (const auto& e : entries) {
        if (e.name.size() > 0xffff) throw Error("tensor name too long");
        Writer pw;
        for (Index i = 0; i < e.value->size(); ++i) pw.put_f64(e.value->data()[i]);
        w.put(static_cast<std::uint16_t>(e.name.size()));
        w.put_bytes(e.name);
        w.put(e.section);
        w.put(static_cast<std::uint8_t>(e.frozen ? 1 : 0));
        w.put(static_cast<std::uint32_t>(e.value->rows()));
        w.put(static_cast<std::uint32_t>(e.value->cols()));
        w.put(offset);
        w.put(fnv1a(pw.bytes.data(), pw.bytes.size()));
        offset += pw.bytes.size();
        payload.insert(payload.end(), pw.bytes.begin(), pw.bytes.end());
    }
    w.put(fnv1a(w.bytes.data(), w.bytes.size()));
    w.bytes.insert(w.bytes.end(), payload.begin(), payload.end());
    return w.bytes;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    Reader r(bytes, origin);
    if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw DataError(origin + " is not an FXCK checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw MigrationError(origin + " uses checkpoint format version " + std::to_string(version) +
                             "; this build reads version " + std::to_string(kCheckpointVersion) +
                             " only and the file must be migrated first");
    }
    const auto header_len = r.get<std::uint32_t>("header length");
    const auto header = r.get_string(header_len, "header text");
    const auto count = r.get<std::uint32_t>("tensor count");

    struct Row {
        std::string name;
        std::uint8_t section, flags;
        std::uint32_t rows, cols;
        std::uint64_t offset, sum;
    };
    std::vector<Row> table;
    std::set<std::pair<std::uint8_t, std::string>> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        Row row;
        const auto len = r.get<std::uint16_t>("tensor name length");
        row.name = r.get_string(len, "tensor name");
        row.section = r.get<std::uint8_t>("tensor section");
        row.flags = r.get<std::uint8_t>("tensor flags");
        row.rows = r.get<std::uint32_t>("tensor rows");
        row.cols = r.get<std::uint32_t>("tensor cols");
        row.offset = r.get<std::uint64_t>("tensor offset");
        row.sum = r.get<std::uint64_t>("tensor checksum");
        if (row.section > adam_v_section) throw DataError(origin + ": tensor '" + row.name + "' has an unknown section");
        if (!seen.emplace(row.section, row.name).second) {
            throw DataError(origin + ": duplicate tensor name '" + row.name + "' in section " + section_name(row.section));
        }
        table.push_back(std::move(row));
    }
    const std::size_t header_end = r.pos();
    const auto header_sum = r.get<std::uint64_t>("header checksum");
    if (header_sum != fnv1a(bytes.data(), header_end)) throw DataError(origin + ": header checksum mismatch");

    const std::size_t payload_start = r.pos();
    std::uint64_t expected_offset = 0;
    for (const auto& row : table) {
        if (row.offset != expected_offset) throw DataError(origin + ": tensor '" + row.name + "' has a non-contiguous offset");
        expected_offset += std::uint64_t{row.rows} * row.cols * 8;
    }
    if (bytes.size() - payload_start < expected_offset) {
        throw DataError("truncated checkpoint " + origin + ": payload needs " + std::to_string(expected_offset) +
                        " bytes at offset " + std::to_string(payload_start) + " but the file has " +
                        std::to_string(bytes.size()) + " bytes");
    }
    if (bytes.size() - payload_start > expected_offset) throw DataError(origin + ": trailing bytes after the payload");

    const auto kv = parse_lines(header, origin);
    Checkpoint ck;
    const auto cfg = parse_model_config(header);
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        throw DataError(origin + ": invalid model config: " + e.what());
    }
    const auto mode = flex_mode_from_string(field(kv, "mode"));
    const int merged_for = number<int>(kv, "merged_for");
    if (field(kv, "flatten") != "row-major") throw DataError(origin + ": unsupported flatten order " + field(kv, "flatten"));
    ck.model = skeleton(cfg, mode, merged_for);
    if (field(kv, "patch_sizes") != join(ck.model.spec.supported)) {
        throw DataError(origin + ": patch-size registry " + field(kv, "patch_sizes") + " does not match the model");
    }
    ck.seed = number<std::uint64_t>(kv, "seed");
    ck.train_mode = field(kv, "train_mode");

    std::map<std::pair<std::uint8_t, std::string>, Mat> tensors;
    std::map<std::string, bool> frozen;
    for (const auto& row : table) {
        const std::size_t start = payload_start + row.offset;
        const std::size_t n = std::size_t{row.rows} * row.cols;
        if (fnv1a(bytes.data() + start, n * 8) != row.sum) {
            throw DataError(origin + ": checksum mismatch in tensor '" + row.name + "' (section " +
                            section_name(row.section) + ")");
        }
        Mat v(row.rows, row.cols);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t u = 0;
            for (std::size_t b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(bytes[start + 8 * i + b]) << (8 * b);
            v.data()[i] = std::bit_cast<double>(u);
        }
        tensors.emplace(std::make_pair(row.section, row.name), std::move(v));
        if (row.section == model_section) frozen[row.name] = (row.flags & 1) != 0;
    }

    std::vector<std::string> trainable;
    std::size_t model_tensors = 0;
    for (auto& np : ck.model.named_parameters()) {
        auto it = tensors.find({model_section, np.name});
        if (it == tensors.end()) throw DataError(origin + ": missing tensor '" + np.name + "'");
        if (it->second.rows() != np.var.value().rows() || it->second.cols() != np.var.value().cols()) {
            throw DataError(origin + ": tensor '" + np.name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                            std::to_string(it->second.cols()) + ", the model expects " +
                            std::to_string(np.var.value().rows()) + "x" + std::to_string(np.var.value().cols()));
        }
        np.var.mutable_value() = it->second;
        np.var.set_requires_grad(!frozen.at(np.name));
        if (!frozen.at(np.name)) trainable.push_back(np.name);
        ++model_tensors;
    }
    if (model_tensors != frozen.size()) throw DataError(origin + ": checkpoint holds tensors the model does not have");

    if (number<int>(kv, "has_state")) {
        TrainState st;
        st.step = number<std::int64_t>(kv, "step");
        st.adam.step = number<std::int64_t>(kv, "adam_step");
        st.flops = number<std::int64_t>(kv, "flops");
        auto take = [&](std::uint8_t section, std::vector<Mat>& out) {
            // a section is either absent or complete
            std::size_t present = 0;
            for (const auto& name : trainable) present += tensors.count({section, name});
            if (present == 0) return;
            for (const auto& name : trainable) {
                auto it = tensors.find({section, name});
                if (it == tensors.end()) {
                    throw DataError(origin + ": section " + section_name(section) + " lacks tensor '" + name + "'");
                }
                out.push_back(it->second);
            }
        };
        take(ema_section, st.ema);
        take(adam_m_section, st.adam.m);
        take(adam_v_section, st.adam.v);
        std::size_t stored = 0;
        for (const auto& row : table) stored += row.section != model_section;
        if (stored != st.ema.size() + st.adam.m.size() + st.adam.v.size()) {
            throw DataError(origin + ": training state holds tensors for unknown parameters");
        }
        ck.state = std::move(st);
    }
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const auto bytes = serialize_checkpoint(ck);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot write checkpoint " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path);
}

}  // namespace flexdit
