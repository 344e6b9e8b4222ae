#include "conformal/core.hpp"
