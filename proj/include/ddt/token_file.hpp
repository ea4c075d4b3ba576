#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ddt {

/// One image as T discrete token ids.
using TokenSequence = std::vector<std::uint32_t>;

/// Header of a token stream file:
///
///     offset  size  field
///     0       4     magic "DDT1"
///     4       4     version (u32 LE)
///     8       4     T (u32 LE)
///     12      4     codebook_size (u32 LE)
///     16      4     count (u32 LE)
///     20      4*count*T  ids (u32 LE), row-major
struct TokenFileHeader {
    static constexpr std::array<char, 4> kMagic{'D', 'D', 'T', '1'};
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::size_t kSize = 20;

    std::uint32_t version = kVersion;
    std::uint32_t T = 0;
    std::uint32_t codebook_size = 0;
    std::uint32_t count = 0;
};

struct TokenFile {
    TokenFileHeader header;
    std::vector<TokenSequence> sequences;
};

std::vector<std::uint8_t> encode_token_file(std::span<const TokenSequence> sequences, std::uint32_t T,
                                            std::uint32_t codebook_size);
TokenFile decode_token_file(std::span<const std::uint8_t> bytes);

void write_token_file(const std::string& path, std::span<const TokenSequence> sequences, std::uint32_t T,
                      std::uint32_t codebook_size);
TokenFile read_token_file(const std::string& path);

}  // namespace ddt
