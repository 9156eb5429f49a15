#include "sundial/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "sundial/error.hpp"

namespace sundial {

namespace {

constexpr char kMagic[4] = {'S', 'N', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(SundialModelT<float>& model, const std::string& path) {
    auto params = named_params(model);
    std::string cfg_text = config_text(model.cfg, model.head);

    std::string header;
    header.append(kMagic, 4);
    put_u32(header, kVersion);
    put_u32(header, static_cast<std::uint32_t>(cfg_text.size()));
    header += cfg_text;
    put_u32(header, static_cast<std::uint32_t>(params.size()));
    std::uint64_t offset = 0;
    for (auto& [name, p] : params) {
        put_u32(header, static_cast<std::uint32_t>(name.size()));
        header += name;
        put_u32(header, static_cast<std::uint32_t>(p->rank()));
        for (auto e : p->shape()) put_u64(header, static_cast<std::uint64_t>(e));
        put_u64(header, offset);
        offset += static_cast<std::uint64_t>(p->numel()) * sizeof(float);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (auto& [name, p] : params) {
        (void)name;
        out.write(reinterpret_cast<const char*>(p->data().data()),
                  static_cast<std::streamsize>(p->data().size() * sizeof(float)));
    }
    if (!out) throw CheckpointError("write failed: " + path);
}

SundialModelT<float> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r{buf};

    auto magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw CheckpointError("bad magic: not a model checkpoint");
    auto version = r.u32();
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

    auto cfg_len = r.u32();
    auto cfg_text = r.bytes(cfg_len);
    ModelConfig cfg;
    HeadKind head = HeadKind::timeflow;
    parse_config_text(cfg_text, cfg, head);
    cfg.validate();

    auto model = init_model(cfg, head, 0);
    auto params = named_params(model);
    auto count = r.u32();
    if (count != params.size())
        throw CheckpointError("tensor count " + std::to_string(count) + " does not match the " +
                              std::to_string(params.size()) + " parameters of the config");

    struct Entry {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Entry e;
        auto name_len = r.u32();
        e.name = r.bytes(name_len);
        auto rank = r.u32();
        if (rank > 8) throw CheckpointError("tensor '" + e.name + "': implausible rank");
        for (std::uint32_t d = 0; d < rank; ++d)
            e.shape.push_back(static_cast<std::int64_t>(r.u64()));
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }

    const std::size_t payload_start = r.pos;
    std::uint64_t expect_offset = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        auto& [name, p] = params[i];
        if (e.name != name)
            throw CheckpointError("tensor '" + e.name + "' where '" + name + "' was expected");
        if (e.shape != p->shape())
            throw CheckpointError("tensor '" + e.name + "': shape " + shape_str(e.shape) +
                                  " does not match config shape " + shape_str(p->shape()));
        if (e.offset != expect_offset)
            throw CheckpointError("tensor '" + e.name + "': unexpected payload offset");
        auto bytes = static_cast<std::size_t>(p->numel()) * sizeof(float);
        if (payload_start + e.offset + bytes > buf.size())
            throw CheckpointError("tensor '" + e.name + "': payload truncated");
        std::memcpy(p->mutable_data().data(), buf.data() + payload_start + e.offset, bytes);
        expect_offset += bytes;
    }
    if (payload_start + expect_offset != buf.size())
        throw CheckpointError("trailing bytes after the payload");
    return model;
}

void require_same_architecture(const ModelConfig& a, HeadKind ha, const ModelConfig& b,
                               HeadKind hb) {
    std::string diffs;
    auto note = [&](const char* field, const std::string& lhs, const std::string& rhs) {
        if (!diffs.empty()) diffs += ", ";
        diffs += std::string(field) + " (" + lhs + " vs " + rhs + ")";
    };
    auto cmp_i = [&](const char* field, std::int64_t x, std::int64_t y) {
        if (x != y) note(field, std::to_string(x), std::to_string(y));
    };
    if (ha != hb) note("head", head_kind_name(ha), head_kind_name(hb));
    cmp_i("patch_len", a.patch_len, b.patch_len);
    cmp_i("horizon", a.horizon, b.horizon);
    cmp_i("max_context", a.max_context, b.max_context);
    cmp_i("dim", a.dim, b.dim);
    cmp_i("ffn_dim", a.ffn_dim, b.ffn_dim);
    cmp_i("heads", a.heads, b.heads);
    cmp_i("layers", a.layers, b.layers);
    cmp_i("tf_dim", a.tf_dim, b.tf_dim);
    cmp_i("tf_layers", a.tf_layers, b.tf_layers);
    if (!diffs.empty()) throw CheckpointError("architecture mismatch: " + diffs);
}

}  // namespace sundial
