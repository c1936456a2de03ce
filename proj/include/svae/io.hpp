// SPDX-License-Identifier: Apache-2.0
//
// File plumbing: base64 for checkpoint payloads, JSON helpers, and the
// dataset container (JSON header + sibling raw little-endian f64 binary).
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "svae/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "payloads are little-endian; big-endian hosts unsupported");

namespace svae::io {

using json = nlohmann::ordered_json;

inline constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::uint8_t* data, std::size_t n) {
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 3 <= n; i += 3) {
    const std::uint32_t v = (std::uint32_t(data[i]) << 16) |
                            (std::uint32_t(data[i + 1]) << 8) |
                            std::uint32_t(data[i + 2]);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back(kB64Alphabet[v & 63]);
  }
  const std::size_t rem = n - i;
  if (rem == 1) {
    const std::uint32_t v = std::uint32_t(data[i]) << 16;
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    const std::uint32_t v =
        (std::uint32_t(data[i]) << 16) | (std::uint32_t(data[i + 1]) << 8);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto value_of = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  require(s.size() % 4 == 0, "base64_decode: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (std::size_t i = 0; i < s.size(); i += 4) {
    int vals[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = s[i + k];
      if (c == '=') {
        require(i + 4 == s.size() && k >= 2, "base64_decode: stray padding");
        vals[k] = 0;
        ++pad;
      } else {
        vals[k] = value_of(c);
        require(vals[k] >= 0 && pad == 0, "base64_decode: invalid character");
      }
    }
    const std::uint32_t v = (std::uint32_t(vals[0]) << 18) |
                            (std::uint32_t(vals[1]) << 12) |
                            (std::uint32_t(vals[2]) << 6) |
                            std::uint32_t(vals[3]);
    out.push_back(std::uint8_t((v >> 16) & 0xff));
    if (pad < 2) out.push_back(std::uint8_t((v >> 8) & 0xff));
    if (pad < 1) out.push_back(std::uint8_t(v & 0xff));
  }
  return out;
}

inline std::string encode_f64(const double* data, std::size_t n) {
  return base64_encode(reinterpret_cast<const std::uint8_t*>(data),
                       n * sizeof(double));
}

inline std::vector<double> decode_f64(const std::string& s) {
  const auto bytes = base64_decode(s);
  require(bytes.size() % sizeof(double) == 0,
          "decode_f64: payload not a whole number of doubles");
  std::vector<double> out(bytes.size() / sizeof(double));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

inline json mat_to_json(const Mat& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["data"] = encode_f64(m.data(), static_cast<std::size_t>(m.size()));
  return j;
}

inline Mat mat_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = decode_f64(j.at("data").get<std::string>());
  require(static_cast<Eigen::Index>(data.size()) == rows * cols,
          "mat_from_json: size mismatch");
  Mat m(rows, cols);
  std::memcpy(m.data(), data.data(), data.size() * sizeof(double));
  return m;
}

inline json load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "load_json: cannot open " + path.string());
  return json::parse(in);
}

inline void save_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "save_json: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

// A split of sequences with common (T, dims). Each sequence is stored as a
// dims x T matrix (column t = frame t); the column-major bytes of that
// matrix coincide with the row-major T x dims layout used on disk.
struct SequenceSet {
  int dims = 0;
  int T = 0;
  std::vector<Mat> seqs;

  int n_seq() const { return static_cast<int>(seqs.size()); }
};

inline void write_sequence_set(const std::filesystem::path& header_path,
                               const SequenceSet& set) {
  json header;
  header["dims"] = set.dims;
  header["T"] = set.T;
  header["n_seq"] = set.n_seq();
  header["dtype"] = "f64";
  header["layout"] = "seq-major row-major";
  std::filesystem::path bin_path = header_path;
  bin_path.replace_extension(".bin");
  header["payload"] = bin_path.filename().string();
  save_json(header_path, header);

  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  require(bin.good(), "write_sequence_set: cannot open " + bin_path.string());
  for (const Mat& s : set.seqs) {
    require(s.rows() == set.dims && s.cols() == set.T,
            "write_sequence_set: sequence shape mismatch");
    bin.write(reinterpret_cast<const char*>(s.data()),
              static_cast<std::streamsize>(sizeof(double) * s.size()));
  }
  require(bin.good(), "write_sequence_set: write failed");
}

inline SequenceSet read_sequence_set(const std::filesystem::path& header_path) {
  const json header = load_json(header_path);
  SequenceSet set;
  set.dims = header.at("dims").get<int>();
  set.T = header.at("T").get<int>();
  const int n_seq = header.at("n_seq").get<int>();
  require(header.at("dtype").get<std::string>() == "f64",
          "read_sequence_set: unsupported dtype");
  require(header.at("layout").get<std::string>() == "seq-major row-major",
          "read_sequence_set: unsupported layout");
  const auto bin_path =
      header_path.parent_path() / header.at("payload").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  require(bin.good(), "read_sequence_set: cannot open " + bin_path.string());
  set.seqs.reserve(n_seq);
  for (int i = 0; i < n_seq; ++i) {
    Mat s(set.dims, set.T);
    bin.read(reinterpret_cast<char*>(s.data()),
             static_cast<std::streamsize>(sizeof(double) * s.size()));
    require(bin.gcount() ==
                static_cast<std::streamsize>(sizeof(double) * s.size()),
            "read_sequence_set: truncated payload");
    set.seqs.push_back(std::move(s));
  }
  return set;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_text_file: cannot open " + path.string());
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "write_text_file: cannot open " + path.string());
  out << text;
}

}  // namespace svae::io
