#include "patchsim/arch.hpp"

#include <cctype>
#include <charconv>
#include <sstream>

namespace patchsim {

namespace {

std::string strip_whitespace(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
  }
  return out;
}

// Splits on '-' at paren depth zero so negative argument values still land
// inside their token and get rejected as non-positive integers.
std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> tokens;
  std::string cur;
  int depth = 0;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (c == '-' && depth == 0) {
      tokens.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  tokens.push_back(cur);
  return tokens;
}

[[noreturn]] void fail(const std::string& what, int pos) {
  throw ArchParseError(what + " at token " + std::to_string(pos), pos);
}

int parse_positive_int(const std::string& text, int pos) {
  int value = 0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    fail("expected integer argument, got '" + text + "'", pos);
  }
  if (value <= 0) {
    fail("argument must be a positive integer, got " + std::to_string(value), pos);
  }
  return value;
}

LayerDescriptor parse_token(const std::string& token, int pos) {
  if (token.empty()) fail("empty layer token", pos);
  std::string name;
  std::vector<int> args;
  const std::size_t open = token.find('(');
  if (open == std::string::npos) {
    name = token;
    if (name.find(')') != std::string::npos) fail("stray ')' in '" + token + "'", pos);
  } else {
    name = token.substr(0, open);
    if (token.back() != ')') fail("missing ')' in '" + token + "'", pos);
    const std::string inner = token.substr(open + 1, token.size() - open - 2);
    if (inner.find('(') != std::string::npos || inner.find(')') != std::string::npos) {
      fail("nested parentheses in '" + token + "'", pos);
    }
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = inner.find(',', start);
      const std::string piece =
          comma == std::string::npos ? inner.substr(start) : inner.substr(start, comma - start);
      args.push_back(parse_positive_int(piece, pos));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }

  auto want = [&](std::size_t n) {
    if (args.size() != n) {
      fail(name + " expects " + std::to_string(n) + " arguments, got " +
               std::to_string(args.size()),
           pos);
    }
  };

  if (name == "C") {
    want(3);
    return LayerDescriptor::conv(args[0], args[1], args[2]);
  }
  if (name == "P") {
    want(2);
    return LayerDescriptor::pool(args[0], args[1]);
  }
  if (name == "F") {
    want(1);
    return LayerDescriptor::fc(args[0]);
  }
  if (name == "ReLU") {
    want(0);
    return LayerDescriptor::relu_();
  }
  if (name == "SPP") {
    want(1);
    return LayerDescriptor::spp(args[0]);
  }
  if (name == "Stack") {
    want(1);
    return LayerDescriptor::stack(args[0]);
  }
  fail("unknown layer name '" + name + "'", pos);
}

std::string render_token(const LayerDescriptor& d) {
  std::ostringstream os;
  switch (d.kind) {
    case LayerDescriptor::Kind::kConv:
      os << "C(" << d.args[0] << "," << d.args[1] << "," << d.args[2] << ")";
      break;
    case LayerDescriptor::Kind::kPool:
      os << "P(" << d.args[0] << "," << d.args[1] << ")";
      break;
    case LayerDescriptor::Kind::kFc:
      os << "F(" << d.args[0] << ")";
      break;
    case LayerDescriptor::Kind::kRelu:
      os << "ReLU";
      break;
    case LayerDescriptor::Kind::kSpp:
      os << "SPP(" << d.args[0] << ")";
      break;
    case LayerDescriptor::Kind::kStack:
      os << "Stack(" << d.args[0] << ")";
      break;
  }
  return os.str();
}

std::string describe(const LayerDescriptor& d) { return render_token(d); }

}  // namespace

ArchSpec parse_arch(const std::string& text) {
  const std::string clean = strip_whitespace(text);
  const std::vector<std::string> tokens = split_tokens(clean);
  ArchSpec spec;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    spec.layers.push_back(parse_token(tokens[i], static_cast<int>(i) + 1));
  }
  return spec;
}

std::string render_arch(const ArchSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (i) out.push_back('-');
    out += render_token(spec.layers[i]);
  }
  return out;
}

ArchSpec expand_stacks(const ArchSpec& spec) {
  ArchSpec out;
  for (const LayerDescriptor& d : spec.layers) {
    if (d.kind == LayerDescriptor::Kind::kStack) {
      for (int i = 0; i < 3; ++i) {
        out.layers.push_back(LayerDescriptor::conv(d.args[0], 3, 1));
        out.layers.push_back(LayerDescriptor::relu_());
      }
    } else {
      out.layers.push_back(d);
    }
  }
  return out;
}

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::vector<std::vector<int>> infer_shapes(const ArchSpec& spec,
                                           const std::vector<int>& input_shape) {
  if (input_shape.empty()) throw ShapeError("infer_shapes: empty input shape");
  for (int d : input_shape) {
    if (d < 1) throw ShapeError("infer_shapes: non-positive input extent");
  }

  std::vector<std::vector<int>> shapes;
  std::vector<int> cur = input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDescriptor& d = spec.layers[i];
    const std::string where =
        "descriptor " + std::to_string(i + 1) + " (" + describe(d) + ")";
    switch (d.kind) {
      case LayerDescriptor::Kind::kStack:
        throw Error("infer_shapes: unexpanded Stack at " + where);
      case LayerDescriptor::Kind::kConv: {
        if (cur.size() != 3) {
          throw ShapeError("infer_shapes: conv needs a (c,h,w) input at " + where);
        }
        const int k = d.args[1], s = d.args[2];
        const int oh = (cur[1] - k) / s + 1;
        const int ow = (cur[2] - k) / s + 1;
        if (oh < 1 || ow < 1) {
          throw ShapeUnderflowError("spatial extent underflows to " + std::to_string(std::min(oh, ow)) +
                                        " at " + where,
                                    static_cast<int>(i));
        }
        cur = {d.args[0], oh, ow};
        break;
      }
      case LayerDescriptor::Kind::kPool: {
        if (cur.size() != 3) {
          throw ShapeError("infer_shapes: pool needs a (c,h,w) input at " + where);
        }
        const int k = d.args[0], s = d.args[1];
        const int oh = (cur[1] - k) / s + 1;
        const int ow = (cur[2] - k) / s + 1;
        if (oh < 1 || ow < 1) {
          throw ShapeUnderflowError("spatial extent underflows to " + std::to_string(std::min(oh, ow)) +
                                        " at " + where,
                                    static_cast<int>(i));
        }
        cur = {cur[0], oh, ow};
        break;
      }
      case LayerDescriptor::Kind::kRelu:
        break;
      case LayerDescriptor::Kind::kFc:
        cur = {d.args[0]};
        break;
      case LayerDescriptor::Kind::kSpp: {
        if (cur.size() != 3) {
          throw ShapeError("infer_shapes: SPP needs a (c,h,w) input at " + where);
        }
        const int g = d.args[0];
        if (cur[1] < g || cur[2] < g) {
          throw ShapeUnderflowError("input " + std::to_string(cur[1]) + "x" +
                                        std::to_string(cur[2]) + " smaller than SPP grid at " +
                                        where,
                                    static_cast<int>(i));
        }
        cur = {cur[0] * g * g};
        break;
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

}  // namespace patchsim
