#pragma once

#include "pcsc/config.hpp"
#include "pcsc/export.hpp"
#include "pcsc/probe.hpp"
#include "pcsc/trainer.hpp"
