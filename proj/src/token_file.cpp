#include "ddt/token_file.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "ddt/binary_io.hpp"
#include "ddt/errors.hpp"

namespace ddt {

namespace bin {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(path, "cannot open file");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, target);
}

}  // namespace bin

std::vector<std::uint8_t> encode_token_file(std::span<const TokenSequence> sequences, std::uint32_t T,
                                            std::uint32_t codebook_size) {
    if (T == 0) throw DomainError("token file: T must be positive");
    bin::Writer w;
    w.bytes().reserve(TokenFileHeader::kSize + sequences.size() * T * 4);
    for (char c : TokenFileHeader::kMagic) w.put<std::uint8_t>(static_cast<std::uint8_t>(c));
    w.put<std::uint32_t>(TokenFileHeader::kVersion);
    w.put<std::uint32_t>(T);
    w.put<std::uint32_t>(codebook_size);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(sequences.size()));
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        const auto& seq = sequences[s];
        if (seq.size() != T)
            throw FormatError(w.bytes().size(), "token file: sequence " + std::to_string(s) + " has length " +
                                                    std::to_string(seq.size()) + ", expected " + std::to_string(T));
        for (auto id : seq) {
            if (id >= codebook_size)
                throw FormatError(w.bytes().size(), "token file: id " + std::to_string(id) + " in sequence " +
                                                        std::to_string(s) + " is not below codebook_size " +
                                                        std::to_string(codebook_size));
            w.put<std::uint32_t>(id);
        }
    }
    return std::move(w.bytes());
}

TokenFile decode_token_file(std::span<const std::uint8_t> bytes) {
    bin::Reader r(bytes);
    const auto magic = r.get_bytes(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), TokenFileHeader::kMagic.begin(),
                    [](std::uint8_t a, char b) { return a == static_cast<std::uint8_t>(b); }))
        throw FormatError(0, "bad magic, expected \"DDT1\"");
    TokenFile f;
    f.header.version = r.get<std::uint32_t>("version");
    if (f.header.version != TokenFileHeader::kVersion)
        throw FormatError(4, "unsupported token file version " + std::to_string(f.header.version));
    f.header.T = r.get<std::uint32_t>("T");
    f.header.codebook_size = r.get<std::uint32_t>("codebook_size");
    f.header.count = r.get<std::uint32_t>("count");
    if (f.header.T == 0) throw FormatError(8, "T must be positive");

    const std::uint64_t expected = std::uint64_t{f.header.count} * f.header.T * 4;
    if (r.remaining() < expected)
        throw FormatError(r.offset() + r.remaining(), "truncated payload: expected " + std::to_string(expected) +
                                                          " bytes, found " + std::to_string(r.remaining()));
    if (r.remaining() > expected) throw FormatError(r.offset() + expected, "trailing bytes after payload");

    f.sequences.resize(f.header.count);
    for (auto& seq : f.sequences) {
        seq.resize(f.header.T);
        for (auto& id : seq) {
            const auto at = r.offset();
            id = r.get<std::uint32_t>("payload");
            if (id >= f.header.codebook_size)
                throw FormatError(at, "token id " + std::to_string(id) + " is not below codebook_size " +
                                          std::to_string(f.header.codebook_size));
        }
    }
    return f;
}

void write_token_file(const std::string& path, std::span<const TokenSequence> sequences, std::uint32_t T,
                      std::uint32_t codebook_size) {
    const auto bytes = encode_token_file(sequences, T, codebook_size);
    bin::write_file(path, bytes);
}

TokenFile read_token_file(const std::string& path) {
    const auto bytes = bin::read_file(path);
    return decode_token_file(bytes);
}

}  // namespace ddt
