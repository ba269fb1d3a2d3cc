#include "it3d/diffmath/tensor.hpp"

#include <atomic>
#include <sstream>

namespace it3d {

namespace {
std::atomic<bool> g_checked{false};
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

void throw_shape_error(std::string_view op, std::string_view detail, const Shape& a,
                       const Shape& b) {
  std::string msg(op);
  msg += ": ";
  msg += detail;
  msg += " (got ";
  msg += shape_string(a);
  if (!b.empty()) {
    msg += " and ";
    msg += shape_string(b);
  }
  msg += ')';
  throw ShapeError(msg);
}

void set_checked_mode(bool enabled) { g_checked.store(enabled); }
bool checked_mode() { return g_checked.load(); }

}  // namespace it3d
