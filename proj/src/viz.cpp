#include "rcalign/viz.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cctype>
#include <cstdio>

#include "rcalign/error.hpp"

namespace rcalign::viz {

namespace {

void check_matrix(const Tensor& m, const char* what) {
  if (m.rank() != 2) throw DimensionError(std::string(what) + ": expected a [T x N] matrix, got " + shape_str(m.shape()));
}

std::uint8_t level(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

std::string header(const char* magic, std::size_t w, std::size_t h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Whitespace-separated header token of a PNM file.
std::size_t pnm_number(std::string_view bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t v = 0;
  const auto [end, ec] = std::from_chars(bytes.data() + pos, bytes.data() + bytes.size(), v);
  if (ec != std::errc()) throw FormatError("PNM header: expected a number at byte " + std::to_string(pos));
  pos = static_cast<std::size_t>(end - bytes.data());
  return v;
}

}  // namespace

std::string matrix_csv(const Tensor& m) {
  check_matrix(m, "matrix_csv");
  std::string out;
  char buf[64];
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    const auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const int n = std::snprintf(buf, sizeof buf, "%.6f", row[c]);
      if (c > 0) out += ',';
      out.append(buf, static_cast<std::size_t>(n));
    }
    out += '\n';
  }
  return out;
}

Tensor parse_matrix_csv(std::string_view text) {
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty()) continue;
    std::size_t count = 0;
    while (true) {
      const std::size_t comma = line.find(',');
      const std::string_view cell = trim(line.substr(0, comma));
      double v = 0.0;
      const auto [end, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || end != cell.data() + cell.size()) {
        throw ValueError("CSV row " + std::to_string(line_no) + ", column " + std::to_string(count + 1) +
                         ": '" + std::string(cell) + "' is not a number");
      }
      values.push_back(v);
      ++count;
      if (comma == std::string_view::npos) break;
      line = line.substr(comma + 1);
    }
    if (rows == 0) {
      cols = count;
    } else if (count != cols) {
      throw ValueError("CSV row " + std::to_string(line_no) + " has " + std::to_string(count) +
                       " columns, expected " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw ValueError("CSV contains no rows");
  return Tensor({rows, cols}, std::move(values));
}

std::string to_pgm(const Tensor& a) {
  check_matrix(a, "to_pgm");
  std::string out = header("P5", a.dim(1), a.dim(0));
  for (double v : a.data()) out += static_cast<char>(level(v));
  return out;
}

std::string to_ppm(const Tensor& a) {
  check_matrix(a, "to_ppm");
  std::string out = header("P6", a.dim(1), a.dim(0));
  for (double v : a.data()) {
    const std::uint8_t red = level(v);
    out += static_cast<char>(red);
    out += static_cast<char>(0);
    out += static_cast<char>(255 - red);
  }
  return out;
}

Image parse_pnm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError("not a binary PGM/PPM file");
  }
  Image img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  img.width = pnm_number(bytes, pos);
  img.height = pnm_number(bytes, pos);
  if (pnm_number(bytes, pos) != 255) throw FormatError("PNM maxval must be 255");
  ++pos;  // single whitespace byte before the raster
  const std::size_t n = img.width * img.height * img.channels;
  if (pos > bytes.size() || bytes.size() - pos != n) {
    throw FormatError("PNM raster has " + std::to_string(bytes.size() - std::min(pos, bytes.size())) +
                      " bytes, expected " + std::to_string(n));
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

}  // namespace rcalign::viz
