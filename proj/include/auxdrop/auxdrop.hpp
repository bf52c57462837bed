#pragma once

#include "auxdrop/rng.hpp"
#include "auxdrop/errors.hpp"
#include "auxdrop/instance.hpp"
#include "auxdrop/nn.hpp"
#include "auxdrop/aux_layer.hpp"
#include "auxdrop/model.hpp"
#include "auxdrop/streams.hpp"
#include "auxdrop/config.hpp"
#include "auxdrop/grad_check.hpp"
#include "auxdrop/harness.hpp"
