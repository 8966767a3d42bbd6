"""
Analytic parameter and multiply accounting.

Costs assume stride 1 and "same" padding, count multiplications only and
treat every layer as bias-free, so they line up with the "#Parameters" and
"#Multiplies" columns of the published DS-ResNet parameter tables.
"""
import csv
import io
import logging
from collections import namedtuple
from decimal import Decimal, ROUND_HALF_UP
from fractions import Fraction

from . import model_zoo
from .model_zoo import (STANDARD_CONV, SE, AVG_POOL, RESIDUAL_GROUP, DS_CONV,
                        GLOBAL_AVG_POOL, SOFTMAX_FC, SE_DEPTHWISE,
                        SE_POINTWISE)
from .se_block import SEConfig, se_param_count, se_multiply_count
from .exceptions import VerificationError

logger = logging.getLogger(__name__)


def cost_standard_conv(c_in, c_out, dk_h, dk_w, h_in, w_in):
    params = c_in * dk_h * dk_w * c_out
    return params, params * h_in * w_in


def cost_depthwise(c_in, dk_h, dk_w, h_in, w_in):
    params = dk_h * dk_w * c_in
    return params, params * h_in * w_in


def cost_pointwise(c_in, c_out, h_in, w_in):
    params = c_in * c_out
    return params, params * h_in * w_in


def ds_vs_standard_ratio(c_out, d_k):
    """
    Cost of a depthwise separable layer relative to a standard one with the
    same C_in = C_out and D_K x D_K kernel, as an exact Fraction.
    """
    return Fraction(1, c_out) + Fraction(1, d_k * d_k)


CostRow = namedtuple('CostRow', ['layer', 'label', 'params', 'multiplies',
                                 'height', 'width'])


class CostReport(object):
    """
    Per-layer costs of one architecture.

    rows -- CostRow per LayerConfig; height/width are the spatial size of the
            feature maps the layer produces
    """

    def __init__(self, name, rows):
        self.name = name
        self.rows = list(rows)

    @property
    def total_params(self):
        return sum(row.params for row in self.rows)

    @property
    def total_multiplies(self):
        return sum(row.multiplies for row in self.rows)

    @property
    def totals(self):
        return self.total_params, self.total_multiplies

    @property
    def spatial_trace(self):
        return [(row.height, row.width) for row in self.rows]

    def as_table(self):
        header = ('Layer', '#Parameters', '#Multiplies', 'H', 'W')
        lines = [(row.label, str(row.params) if row.params else '-',
                  str(row.multiplies), str(row.height), str(row.width))
                 for row in self.rows]
        lines.append(('Total', str(self.total_params),
                      str(self.total_multiplies), '', ''))
        widths = [max(len(line[i]) for line in [header] + lines)
                  for i in range(len(header))]

        def render(cells):
            first = cells[0].ljust(widths[0])
            rest = [cell.rjust(width) for cell, width in zip(cells[1:], widths[1:])]
            return '  '.join([first] + rest).rstrip()

        out = ['%s (%s params, %s multiplies)' % (
            self.name, format_count(self.total_params, 3),
            format_count(self.total_multiplies, 3))]
        out.append(render(header))
        out.append('-' * len(out[-1]))
        out.extend(render(line) for line in lines[:-1])
        out.append('-' * len(out[1]))
        out.append(render(lines[-1]))
        return '\n'.join(out)

    def as_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(['layer', 'params', 'multiplies', 'H', 'W'])
        for row in self.rows:
            writer.writerow([row.label, row.params, row.multiplies,
                             row.height, row.width])
        return buf.getvalue()


COUNT_UNITS = ((10 ** 9, 'G'), (10 ** 6, 'M'), (10 ** 3, 'K'))


def _round_scaled(value, scale, digits):
    scaled = Decimal(value) / Decimal(scale)
    decimals = max(0, digits - len(str(int(scaled))))
    return scaled.quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP)


def format_count(value, digits=3):
    """
    Human form of a count, e.g. 285451648 -> '285M', 15232 -> '15.2K'.
    """
    for position, (scale, suffix) in enumerate(COUNT_UNITS):
        if value >= scale:
            rounded = _round_scaled(value, scale, digits)
            # 999999 rounds to 1000K; carry into the next unit
            if rounded >= 1000 and position > 0:
                scale, suffix = COUNT_UNITS[position - 1]
                rounded = _round_scaled(value, scale, digits)
            text = str(rounded)
            if '.' in text:
                text = text.rstrip('0').rstrip('.')
            return text + suffix
    return str(value)


def _row_label(config):
    if config.kind == STANDARD_CONV:
        return 'Conv'
    if config.kind == SE:
        return 'SE'
    if config.kind in (AVG_POOL, GLOBAL_AVG_POOL):
        return 'Avg-Pool'
    if config.kind == RESIDUAL_GROUP:
        return 'Res×%d' % config.repeat
    if config.kind == DS_CONV:
        if config.repeat == 1:
            return 'DS-Conv'
        return 'DS-Conv×%d' % config.repeat
    return 'Softmax'


def _se_cost(channels):
    config = SEConfig(channels)
    return se_param_count(config), se_multiply_count(config)


def unit_cost(unit, normalization=False):
    """
    (params, multiplies) of one depthwise separable layer, including any SE
    block or normalisation attached to it.
    """
    height, width = unit.size
    params, mults = cost_depthwise(unit.in_channels, unit.kernel_h,
                                   unit.kernel_w, height, width)
    p, m = cost_pointwise(unit.in_channels, unit.out_channels, height, width)
    params, mults = params + p, mults + m
    if unit.se_after == SE_DEPTHWISE:
        p, m = _se_cost(unit.in_channels)
        params, mults = params + p, mults + m
    if unit.se_after == SE_POINTWISE:
        p, m = _se_cost(unit.out_channels)
        params, mults = params + p, mults + m
    if normalization:
        params += 2 * unit.out_channels
        mults += unit.out_channels * height * width
    return params, mults


def analyze(spec):
    """
    Returns the CostReport of `spec`, one row per LayerConfig.
    """
    rows = []
    for layer in model_zoo.resolve(spec):
        config = layer.config
        height, width = layer.in_size
        out_h, out_w = layer.out_size
        if config.kind == STANDARD_CONV:
            unit = layer.blocks[0][0]
            params, mults = cost_standard_conv(
                unit.in_channels, unit.out_channels, unit.kernel_h,
                unit.kernel_w, height, width)
        elif config.kind == SE:
            params, mults = _se_cost(layer.in_channels)
        elif config.kind == AVG_POOL:
            params, mults = 0, layer.in_channels * out_h * out_w
        elif config.kind in (RESIDUAL_GROUP, DS_CONV):
            params = mults = 0
            for block in layer.blocks:
                for unit in block:
                    p, m = unit_cost(unit, spec.normalization)
                    params, mults = params + p, mults + m
        elif config.kind == GLOBAL_AVG_POOL:
            params, mults = 0, layer.in_channels
        else:
            params = mults = layer.in_channels * layer.out_channels
        rows.append(CostRow(layer.name, _row_label(config), params, mults,
                            out_h, out_w))
    return CostReport(spec.name, rows)


GoldenTable = namedtuple('GoldenTable', ['preset', 'rows', 'total'])

# (label, exact params or None, printed params, printed multiplies);
# exact params are the sums of the layer formulas, printed values are the
# published ones.
GOLDEN_TABLES = {
    1: GoldenTable('DS-ResNet18', [
        ('Conv', 576, '576', '2.3M'),
        ('SE', 512, '512', '576'),
        ('Res×7', 65408, '65.4K', '264M'),
        ('DS-Conv', 4672, '4672', '18.9M'),
        ('Avg-Pool', 0, None, '64'),
        ('Softmax', 768, '768', '768'),
    ], (71936, '72K', '285M')),
    2: GoldenTable('DS-ResNet14', [
        ('Conv', 288, '288', '1.2M'),
        ('SE', 128, '128', '160'),
        ('Avg-Pool', 0, None, '32K'),
        ('Res×5', 13120, '13.1K', '13.1M'),
        ('DS-Conv', 1312, '1312', '1.3M'),
        ('Avg-Pool', 0, None, '32'),
        ('Softmax', 384, '384', '384'),
    ], (15232, '15.2K', '15.7M')),
    3: GoldenTable('DS-ResNet10', [
        ('Conv', 288, '288', '1.2M'),
        ('SE', 128, '128', '160'),
        ('Avg-Pool', 0, None, '16K'),
        ('DS-Conv×7', 9184, '9.2K', '4.6M'),
        ('Avg-Pool', 0, None, '32'),
        ('Softmax', 384, '384', '384'),
    ], (9984, '10K', '5.8M')),
}

# SE placement ablation: only parameter totals are published
ABLATION_TOTALS = {
    'DS-ResNet18': (71936, '72K'),
    'DS-ResNet18-n': (71424, '71.4K'),
    'DS-ResNet18-d': (79616, '79.6K'),
    'DS-ResNet18-p': (79616, '79.6K'),
}
ABLATION_TABLE_ID = 5

SUFFIXES = {'K': 10 ** 3, 'M': 10 ** 6, 'G': 10 ** 9}

RowCheck = namedtuple('RowCheck', ['row', 'field', 'expected', 'actual',
                                   'passed', 'delta'])


def at_printed_precision(value, printed):
    """
    Formats `value` the way `printed` is written ('2.3M', '576', '32K').
    """
    scale = SUFFIXES.get(printed[-1], 1)
    mantissa = printed[:-1] if scale != 1 else printed
    decimals = len(mantissa.split('.', 1)[1]) if '.' in mantissa else 0
    quantum = Decimal(1).scaleb(-decimals)
    scaled = (Decimal(value) / Decimal(scale)).quantize(quantum,
                                                        rounding=ROUND_HALF_UP)
    suffix = printed[-1] if scale != 1 else ''
    return '%s%s' % (scaled, suffix)


def _printed_delta(value, printed):
    """
    Difference between `value` and `printed` in units of the printed last
    digit.
    """
    scale = SUFFIXES.get(printed[-1], 1)
    mantissa = printed[:-1] if scale != 1 else printed
    decimals = len(mantissa.split('.', 1)[1]) if '.' in mantissa else 0
    unit = Decimal(scale) * Decimal(1).scaleb(-decimals)
    rendered = Decimal(at_printed_precision(value, printed).rstrip('KMG'))
    return int((rendered - Decimal(mantissa)) * Decimal(scale) / unit)


def _check_exact(row, field, expected, actual):
    return RowCheck(row, field, expected, actual, expected == actual,
                    actual - expected)


def _check_printed(row, field, printed, actual, slack=0):
    delta = _printed_delta(actual, printed)
    return RowCheck(row, field, printed, at_printed_precision(actual, printed),
                    abs(delta) <= slack, delta)


def verify_against_paper(report, table_id):
    """
    Compares `report` with a published parameter table.

    Parameters must match exactly; multiplies must match after rounding to
    the printed precision. Table totals were printed from rounded rows, so
    the total multiply count may differ by one unit of the last printed digit.
    Returns a list of RowCheck; `failures(checks)` selects the failing ones.
    """
    if table_id == ABLATION_TABLE_ID:
        return _verify_ablation(report)
    try:
        table = GOLDEN_TABLES[table_id]
    except KeyError:
        raise ValueError('no golden table %r (choose from 1, 2, 3, %d)'
                         % (table_id, ABLATION_TABLE_ID))

    checks = []
    if len(report.rows) != len(table.rows):
        checks.append(RowCheck(report.name, 'rows', len(table.rows),
                               len(report.rows), False,
                               len(report.rows) - len(table.rows)))
    for row, golden in zip(report.rows, table.rows):
        label, exact, printed_params, printed_mults = golden
        if row.label != label:
            checks.append(RowCheck(row.label, 'label', label, row.label,
                                   False, None))
        checks.append(_check_exact(label, 'params', exact, row.params))
        if printed_params is not None:
            checks.append(_check_printed(label, 'params (printed)',
                                         printed_params, row.params))
        checks.append(_check_printed(label, 'multiplies', printed_mults,
                                     row.multiplies))

    exact_total, printed_total, printed_mults = table.total
    checks.append(_check_exact('Total', 'params', exact_total,
                               report.total_params))
    checks.append(_check_printed('Total', 'params (printed)', printed_total,
                                 report.total_params))
    checks.append(_check_printed('Total', 'multiplies', printed_mults,
                                 report.total_multiplies, slack=1))
    for check in failures(checks):
        logger.warning('table %s, %s %s: expected %s, got %s (delta %s)',
                       table_id, check.row, check.field, check.expected,
                       check.actual, check.delta)
    return checks


def _verify_ablation(report):
    if report.name not in ABLATION_TOTALS:
        return [RowCheck(report.name, 'preset', sorted(ABLATION_TOTALS),
                         report.name, False, None)]
    exact, printed = ABLATION_TOTALS[report.name]
    return [_check_exact('Total', 'params', exact, report.total_params),
            _check_printed('Total', 'params (printed)', printed,
                           report.total_params)]


def failures(checks):
    return [check for check in checks if not check.passed]


def assert_matches_golden(report, table_id):
    checks = verify_against_paper(report, table_id)
    failed = failures(checks)
    if failed:
        raise VerificationError(
            '%s does not match table %s: %s' % (
                report.name, table_id,
                '; '.join('%s %s expected %s got %s' % (c.row, c.field,
                                                        c.expected, c.actual)
                          for c in failed)),
            failed)
    return checks
