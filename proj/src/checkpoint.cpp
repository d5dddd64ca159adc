#include "uvx/checkpoint.hpp"

#include "uvx/binary_io.hpp"

namespace uvx {

namespace {

constexpr char kMagic[] = "UVXW";

void put_entry(io::ByteWriter& w, const CheckpointEntry& e) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(e.id.size()));
    w.put_bytes(e.id);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put<std::uint64_t>(d);
    for (float v : e.data) w.put<float>(v);
}

CheckpointEntry get_entry(io::ByteReader& r) {
    CheckpointEntry e;
    const auto len = r.get<std::uint32_t>();
    e.id = r.get_bytes(len);
    const auto rank = r.get<std::uint8_t>();
    for (std::uint8_t i = 0; i < rank; ++i) {
        const auto d = r.get<std::uint64_t>();
        if (d == 0) throw FormatError(r.what() + ": zero extent for '" + e.id + "' at byte offset " + std::to_string(r.offset()));
        e.shape.push_back(static_cast<std::size_t>(d));
    }
    const std::size_t n = shape_numel(e.shape);
    r.require(n * sizeof(float));
    e.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.data[i] = r.get<float>();
    return e;
}

template <class T>
CheckpointEntry to_entry(std::string id, const Tensor<T>& t) {
    CheckpointEntry e{std::move(id), t.shape(), {}};
    e.data.reserve(t.size());
    for (T v : t.data()) e.data.push_back(static_cast<float>(v));
    return e;
}

template <class T>
void copy_into(const CheckpointEntry& e, Tensor<T>& dst, const std::string& expected_id) {
    if (e.id != expected_id) throw FormatError("checkpoint: expected entry '" + expected_id + "', found '" + e.id + "'");
    if (e.shape != dst.shape()) {
        throw FormatError("checkpoint: shape mismatch for '" + e.id + "': file " + shape_str(e.shape) + ", model " +
                          shape_str(dst.shape()));
    }
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(e.data[i]);
}

} // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
    io::ByteWriter w;
    w.put_bytes(std::string_view(kMagic, 4));
    w.put<std::uint16_t>(Checkpoint::kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.params.size()));
    for (const auto& e : ckpt.params) put_entry(w, e);
    if (ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        w.put<std::uint64_t>(o.step);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(o.first.size() + o.second.size()));
        for (const auto& e : o.first) put_entry(w, e);
        for (const auto& e : o.second) put_entry(w, e);
    }
    return w.bytes();
}

Checkpoint decode_checkpoint(std::vector<unsigned char> bytes, const std::string& what) {
    io::ByteReader r(std::move(bytes), what);
    if (r.get_bytes(4) != std::string_view(kMagic, 4)) throw FormatError(what + ": bad magic at byte offset 0");
    const auto version = r.get<std::uint16_t>();
    if (version != Checkpoint::kVersion) {
        throw FormatError(what + ": unsupported version " + std::to_string(version) + " at byte offset 4");
    }
    Checkpoint ckpt;
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) ckpt.params.push_back(get_entry(r));
    if (r.remaining() > 0) {
        OptimizerSnapshot o;
        o.step = r.get<std::uint64_t>();
        const auto mcount = r.get<std::uint32_t>();
        if (mcount % 2 != 0) throw FormatError(what + ": odd optimizer entry count");
        for (std::uint32_t i = 0; i < mcount / 2; ++i) o.first.push_back(get_entry(r));
        for (std::uint32_t i = 0; i < mcount / 2; ++i) o.second.push_back(get_entry(r));
        ckpt.optimizer = std::move(o);
    }
    if (r.remaining() != 0) {
        throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes at byte offset " +
                          std::to_string(r.offset()));
    }
    return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { io::write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path), path); }

template <class T>
Checkpoint snapshot(const ParameterStore<T>& store, AdamW<T>* optimizer) {
    Checkpoint ckpt;
    for (const auto& p : store.params()) ckpt.params.push_back(to_entry(p.id, p.value()));
    if (optimizer) {
        OptimizerSnapshot o;
        o.step = optimizer->step_count();
        const auto& params = store.params();
        for (std::size_t i = 0; i < params.size(); ++i) {
            o.first.push_back(to_entry("adam_m:" + params[i].id, optimizer->first_moments()[i]));
            o.second.push_back(to_entry("adam_v:" + params[i].id, optimizer->second_moments()[i]));
        }
        ckpt.optimizer = std::move(o);
    }
    return ckpt;
}

template <class T>
void restore(const Checkpoint& ckpt, ParameterStore<T>& store, AdamW<T>* optimizer) {
    auto& params = store.params();
    if (ckpt.params.size() != params.size()) {
        throw FormatError("checkpoint: holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) copy_into(ckpt.params[i], params[i].value(), params[i].id);
    if (optimizer && ckpt.optimizer) {
        const auto& o = *ckpt.optimizer;
        if (o.first.size() != params.size()) throw FormatError("checkpoint: optimizer state size mismatch");
        for (std::size_t i = 0; i < params.size(); ++i) {
            copy_into(o.first[i], optimizer->first_moments()[i], "adam_m:" + params[i].id);
            copy_into(o.second[i], optimizer->second_moments()[i], "adam_v:" + params[i].id);
        }
        optimizer->set_step_count(o.step);
    }
}

template Checkpoint snapshot<float>(const ParameterStore<float>&, AdamW<float>*);
template Checkpoint snapshot<double>(const ParameterStore<double>&, AdamW<double>*);
template void restore<float>(const Checkpoint&, ParameterStore<float>&, AdamW<float>*);
template void restore<double>(const Checkpoint&, ParameterStore<double>&, AdamW<double>*);

} // namespace uvx
