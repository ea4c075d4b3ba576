#include "ddt/checkpoint.hpp"

#include <cstring>
#include <stdexcept>

#include "ddt/binary_io.hpp"
#include "ddt/errors.hpp"

namespace ddt {
namespace {

constexpr char kMagic[4] = {'D', 'D', 'T', 'C'};

torch::ScalarType scalar_type(ElementType t) {
    switch (t) {
        case ElementType::f32: return torch::kFloat32;
        case ElementType::f64: return torch::kFloat64;
        case ElementType::i32: return torch::kInt32;
        case ElementType::i64: return torch::kInt64;
        case ElementType::u8: return torch::kUInt8;
    }
    throw std::invalid_argument("unknown element type");
}

ElementType element_type(torch::ScalarType s) {
    switch (s) {
        case torch::kFloat32: return ElementType::f32;
        case torch::kFloat64: return ElementType::f64;
        case torch::kInt32: return ElementType::i32;
        case torch::kInt64: return ElementType::i64;
        case torch::kUInt8: return ElementType::u8;
        case torch::kBool: return ElementType::u8;
        default: throw std::invalid_argument(std::string("unsupported tensor dtype ") + c10::toString(s));
    }
}

bool valid_element_type(std::uint8_t raw) { return raw >= 1 && raw <= 5; }

std::string module_key(const std::string& prefix, const std::string& name) { return prefix + "/" + name; }

}  // namespace

std::size_t element_size(ElementType t) {
    switch (t) {
        case ElementType::f32: return 4;
        case ElementType::f64: return 8;
        case ElementType::i32: return 4;
        case ElementType::i64: return 8;
        case ElementType::u8: return 1;
    }
    throw std::invalid_argument("unknown element type");
}

const char* element_name(ElementType t) {
    switch (t) {
        case ElementType::f32: return "f32";
        case ElementType::f64: return "f64";
        case ElementType::i32: return "i32";
        case ElementType::i64: return "i64";
        case ElementType::u8: return "u8";
    }
    return "?";
}

std::int64_t NamedArray::numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

NamedArray to_array(const torch::Tensor& t) {
    auto src = t.detach().to(torch::kCPU).contiguous();
    if (src.scalar_type() == torch::kBool) src = src.to(torch::kUInt8);
    NamedArray a;
    a.type = element_type(src.scalar_type());
    a.shape = src.sizes().vec();
    a.data.resize(static_cast<std::size_t>(src.numel()) * element_size(a.type));
    if (!a.data.empty()) std::memcpy(a.data.data(), src.data_ptr(), a.data.size());
    return a;
}

torch::Tensor to_tensor(const NamedArray& a) {
    auto t = torch::empty(a.shape, torch::TensorOptions().dtype(scalar_type(a.type)));
    if (static_cast<std::size_t>(t.numel()) * element_size(a.type) != a.data.size())
        throw std::runtime_error("array byte length does not match its shape");
    if (!a.data.empty()) std::memcpy(t.data_ptr(), a.data.data(), a.data.size());
    return t;
}

void CheckpointContainer::add(const std::string& name, NamedArray array) {
    if (name.empty()) throw std::invalid_argument("array name must be non-empty");
    if (array.numel() * static_cast<std::int64_t>(element_size(array.type)) !=
        static_cast<std::int64_t>(array.data.size()))
        throw std::invalid_argument("array '" + name + "': byte length does not match shape");
    if (!arrays.emplace(name, std::move(array)).second)
        throw std::invalid_argument("duplicate array name '" + name + "'");
}

const NamedArray& CheckpointContainer::at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint has no array named '" + name + "'");
    return it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const CheckpointContainer& c) {
    bin::Writer w;
    for (char ch : kMagic) w.put<std::uint8_t>(static_cast<std::uint8_t>(ch));
    w.put<std::uint32_t>(CheckpointContainer::kSchemaVersion);
    w.put<std::uint64_t>(c.step);
    const std::string meta = c.metadata.dump();
    w.put<std::uint64_t>(meta.size());
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()});
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& [name, a] : c.arrays) {
        w.put_string(name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(a.type));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(a.shape.size()));
        for (auto d : a.shape) w.put<std::int64_t>(d);
        w.put<std::uint64_t>(a.data.size());
        // Raw element bytes are host order; only little-endian hosts are supported.
        w.put_bytes(a.data);
    }
    return std::move(w.bytes());
}

CheckpointContainer decode_checkpoint(std::span<const std::uint8_t> bytes) {
    static_assert(std::endian::native == std::endian::little, "checkpoint arrays are stored little-endian");
    bin::Reader r(bytes);
    const auto magic = r.get_bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(0, "bad checkpoint magic, expected \"DDTC\"");
    const auto schema = r.get<std::uint32_t>("schema version");
    if (schema != CheckpointContainer::kSchemaVersion)
        throw FormatError(4, "checkpoint schema version " + std::to_string(schema) + " does not match supported version " +
                                 std::to_string(CheckpointContainer::kSchemaVersion));
    CheckpointContainer c;
    c.step = r.get<std::uint64_t>("step");
    const auto meta_len = r.get<std::uint64_t>("metadata length");
    const auto meta_at = r.offset();
    const auto meta = r.get_bytes(meta_len, "metadata");
    try {
        c.metadata = json::parse(meta.begin(), meta.end());
    } catch (const json::parse_error& e) {
        throw FormatError(meta_at, std::string("metadata parse failure: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = r.get_string("array name");
        const auto type_at = r.offset();
        const auto raw_type = r.get<std::uint8_t>("element type");
        if (!valid_element_type(raw_type))
            throw FormatError(type_at, "array '" + name + "': unknown element type " + std::to_string(raw_type));
        NamedArray a;
        a.type = static_cast<ElementType>(raw_type);
        const auto rank = r.get<std::uint32_t>("rank");
        a.shape.resize(rank);
        for (auto& d : a.shape) {
            d = r.get<std::int64_t>("dimension");
            if (d < 0) throw FormatError(r.offset() - 8, "array '" + name + "': negative dimension");
        }
        const auto len_at = r.offset();
        const auto len = r.get<std::uint64_t>("byte length");
        if (static_cast<std::uint64_t>(a.numel()) * element_size(a.type) != len)
            throw FormatError(len_at, "array '" + name + "': byte length does not match shape");
        const auto data = r.get_bytes(len, "array data");
        a.data.assign(data.begin(), data.end());
        if (c.arrays.count(name)) throw FormatError(len_at, "duplicate array name '" + name + "'");
        c.arrays.emplace(name, std::move(a));
    }
    if (r.remaining() != 0) throw FormatError(r.offset(), "trailing bytes after last array");
    return c;
}

void save_checkpoint(const CheckpointContainer& c, const std::string& path) {
    bin::write_file(path, encode_checkpoint(c));
}

CheckpointContainer load_checkpoint(const std::string& path) { return decode_checkpoint(bin::read_file(path)); }

void add_module_state(CheckpointContainer& c, const std::string& prefix, const torch::nn::Module& module) {
    for (const auto& p : module.named_parameters(true)) c.add(module_key(prefix, p.key()), p.value());
    for (const auto& b : module.named_buffers(true)) c.add(module_key(prefix, b.key()), b.value());
}

void load_module_state(const CheckpointContainer& c, const std::string& prefix, torch::nn::Module& module) {
    torch::NoGradGuard no_grad;
    auto copy_into = [&](const std::string& name, torch::Tensor& dst) {
        const auto src = c.tensor(module_key(prefix, name));
        if (src.sizes() != dst.sizes())
            throw std::runtime_error("checkpoint array '" + module_key(prefix, name) + "' has shape " +
                                     c10::str(src.sizes()) + ", module expects " + c10::str(dst.sizes()));
        dst.copy_(src.to(dst.dtype()));
    };
    for (auto& p : module.named_parameters(true)) copy_into(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) copy_into(b.key(), b.value());
}

}  // namespace ddt
