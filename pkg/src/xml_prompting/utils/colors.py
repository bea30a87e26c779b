class color:
    """ANSI styling helpers used by the log formatter."""

    END = "\033[0m"
    BOLD = "\033[1m"
    ITALIC = "\033[3m"
    HIGHLIGHTED_GREEN = "\033[42m"
    HIGHLIGHTED_RED_LIGHT = "\033[101m"

    GREEN_DARK = "\033[32m"
    YELLOW_DARK = "\033[33m"
    BLUE_DARK = "\033[34m"
    RED = "\033[91m"
    GREEN = "\033[92m"
    PURPLE = "\033[95m"
    CYAN = "\033[96m"
    WHITE = "\033[97m"

    @staticmethod
    def wrap(code: str, text: str) -> str:
        return f"{code}{text}{color.END}"

    @staticmethod
    def bold(text: str):
        return color.wrap(color.BOLD, text)

    @staticmethod
    def italic(text: str):
        return color.wrap(color.ITALIC, text)

    @staticmethod
    def bg_green(text: str):
        return color.wrap(color.HIGHLIGHTED_GREEN, text)

    @staticmethod
    def bg_light_red(text: str):
        return color.wrap(color.HIGHLIGHTED_RED_LIGHT, text)

    @staticmethod
    def red(text: str):
        return color.wrap(color.RED, text)

    @staticmethod
    def green(text: str):
        return color.wrap(color.GREEN, text)

    @staticmethod
    def dark_green(text: str):
        return color.wrap(color.GREEN_DARK, text)

    @staticmethod
    def orange(text: str):
        return color.wrap(color.YELLOW_DARK, text)

    @staticmethod
    def dark_blue(text: str):
        return color.wrap(color.BLUE_DARK, text)

    @staticmethod
    def purple(text: str):
        return color.wrap(color.PURPLE, text)

    @staticmethod
    def cyan(text: str):
        return color.wrap(color.CYAN, text)

    @staticmethod
    def white(text: str):
        return color.wrap(color.WHITE, text)
